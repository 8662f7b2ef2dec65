import copy
import json

import pytest

from qsbnet.cli import example_scenario_path

EXAMPLE = json.loads(example_scenario_path().read_text())


def link(a, b, km=10, qsch=1, pich=1, bcch=1, tdch=4):
    return {"endpoints": [a, b], "length_km": km, "wavelengths": {"QSCh": qsch, "PICh": pich, "BCCh": bcch, "TDCh": tdch}}


@pytest.fixture
def six_node_doc():
    doc = copy.deepcopy(EXAMPLE)
    doc["sim"] = {"duration": 10, "drain": 30, "seed": 1}
    return doc


@pytest.fixture
def two_node_doc():
    return {
        "topology": {
            "nodes": [
                {"id": "a", "roles": ["controller", "qkd-endpoint"]},
                {"id": "b", "roles": ["controller", "qkd-endpoint"]},
            ],
            "links": [link("a", "b", km=20)],
        },
        "traffic": {"lambda": 0, "mu": 1.0, "secure_fraction": 1.0, "required_key_bits": 256},
        "sim": {"duration": 5, "drain": 10, "seed": 3},
    }


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: numbered acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
