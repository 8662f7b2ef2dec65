import json

import pytest

from qsbnet.cli import example_scenario_path
from qsbnet.config import load_scenario, load_scenario_file
from qsbnet.errors import ConfigError


def expect_path(doc, path):
    with pytest.raises(ConfigError) as exc:
        load_scenario(doc)
    assert exc.value.path == path, str(exc.value)
    return exc.value


def test_example_file_loads():
    sc = load_scenario_file(example_scenario_path())
    assert sc.validators == ("n0", "n1", "n2", "n3")
    assert len(sc.topology.nodes) == 6
    assert sc.qkd.session_duration == pytest.approx(0.1)
    assert sc.end_time == sc.sim.duration + sc.sim.drain


def test_defaults_fill_missing_sections(two_node_doc):
    sc = load_scenario({"topology": two_node_doc["topology"]})
    assert sc.traffic.lam == 0.0 and sc.qkd.qubit_rate > 0 and sc.crypto.tx_tag_bits == 32
    assert sc.validators == ("a", "b")


def test_schema_errors_name_field(six_node_doc):
    six_node_doc["traffic"]["lambda"] = -1
    err = expect_path(six_node_doc, "traffic.lambda")
    assert "minimum" in err.message or "less than" in err.message


def test_unknown_key_rejected(six_node_doc):
    six_node_doc["qkd"]["turbo"] = True
    expect_path(six_node_doc, "qkd")


def test_topology_errors_propagate(six_node_doc):
    six_node_doc["topology"]["links"][2]["endpoints"] = ["n2", "ghost"]
    expect_path(six_node_doc, "topology.links[2].endpoints")


def test_timeout_must_exceed_latency(six_node_doc):
    six_node_doc["consensus"]["timeout"] = 0.001
    expect_path(six_node_doc, "consensus.timeout")


def test_too_many_validators(six_node_doc):
    six_node_doc["consensus"]["validators"] = 5
    expect_path(six_node_doc, "consensus.validators")


@pytest.mark.parametrize(
    "attack, path",
    [
        ({"kind": "Eavesdrop", "time": 1, "link": "n0-n9"}, "attacks[0].link"),
        ({"kind": "Sybil", "time": 1, "count": 0}, "attacks[0].count"),
        ({"kind": "NodeFailure", "time": 1, "node": "zz"}, "attacks[0].node"),
        ({"kind": "TamperLedger", "time": 1, "node": "n4", "height": 1, "bit": 0}, "attacks[0].node"),
        ({"kind": "TamperLedger", "time": 1, "node": "n1", "height": -1, "bit": 0}, "attacks[0].height"),
        ({"kind": "NodeFailure", "time": 99, "node": "n1"}, "attacks[0].time"),
        ({"kind": "Jamming", "time": 1}, "attacks[0].kind"),
    ],
)
def test_attack_validation(six_node_doc, attack, path):
    six_node_doc["attacks"] = [attack]
    expect_path(six_node_doc, path)


def test_per_link_channel_override(six_node_doc):
    six_node_doc["qkd"]["links"] = {"n1-n2": {"eavesdrop_fraction": 0.5}}
    sc = load_scenario(six_node_doc)
    assert sc.qkd.channel_for("n1-n2").eavesdrop_fraction == 0.5
    assert sc.qkd.channel_for("n1-n2").loss_probability == sc.qkd.channel.loss_probability
    assert sc.qkd.channel_for("n0-n1").eavesdrop_fraction == 0.0
    six_node_doc["qkd"]["links"] = {"nope": {}}
    expect_path(six_node_doc, "qkd.links.nope")


def test_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_scenario_file(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        load_scenario_file(tmp_path / "missing.json")


def test_example_round_trips_through_json():
    doc = json.loads(example_scenario_path().read_text())
    assert load_scenario(doc).validators == load_scenario_file(example_scenario_path()).validators
