import itertools

import pytest
from hypothesis import given, settings, strategies as st

from conftest import link
from qsbnet.errors import ConfigError, InvalidInput, NoRoute, NoWavelength
from qsbnet.topology import Link, LinkState, Node, Topology, assign_wavelength, load_topology, release_wavelength, route


def ring_doc(n):
    nodes = [{"id": f"v{i}", "roles": ["controller"]} for i in range(n)]
    links = [link(f"v{i}", f"v{(i + 1) % n}") for i in range(n)]
    return {"nodes": nodes, "links": links}


def all_simple_paths(topo, src, dst):
    """Brute-force oracle: every simple path, by exhaustive DFS."""
    out = []

    def walk(path):
        u = path[-1]
        if u == dst:
            out.append(list(path))
            return
        for v in topo.adjacency[u]:
            if v not in path:
                walk(path + [v])

    walk([src])
    return out


def oracle_route(topo, src, dst):
    paths = all_simple_paths(topo, src, dst)
    return min(paths, key=lambda p: (len(p), p)) if paths else None


def test_minimal_document():
    topo = load_topology({"nodes": [{"id": "a"}, {"id": "b"}], "links": [link("a", "b")]})
    assert len(topo.links) == 1
    assert topo.link_between("b", "a").id == "a-b"


def test_unknown_node_names_link():
    doc = {"nodes": [{"id": "a"}, {"id": "b"}], "links": [link("a", "b"), link("a", "zz")]}
    with pytest.raises(ConfigError) as exc:
        load_topology(doc)
    assert exc.value.path == "topology.links[1].endpoints"
    assert "zz" in str(exc.value)


def test_ring_accepted():
    topo = load_topology(ring_doc(6))
    assert topo.is_connected() and len(topo.links) == 6


def test_disconnected_rejected():
    doc = {"nodes": [{"id": "a"}, {"id": "b"}, {"id": "c"}], "links": [link("a", "b")]}
    with pytest.raises(ConfigError, match="disconnected"):
        load_topology(doc)


def test_qsch_requires_pich():
    doc = {"nodes": [{"id": "a"}, {"id": "b"}], "links": [link("a", "b", pich=0)]}
    with pytest.raises(ConfigError) as exc:
        load_topology(doc)
    assert exc.value.path == "topology.links[0].wavelengths.PICh"


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda d: d["links"][0]["wavelengths"].update(TDCh=-1), "topology.links[0].wavelengths.TDCh"),
        (lambda d: d["links"][0]["wavelengths"].update(XCh=1), "topology.links[0].wavelengths.XCh"),
        (lambda d: d["nodes"][0].update(roles=["boss"]), "topology.nodes[0].roles[0]"),
        (lambda d: d["nodes"].append({"id": "v0"}), "topology.nodes[6].id"),
        (lambda d: d["links"].append(link("v1", "v0")), "topology.links[6].endpoints"),
    ],
)
def test_field_paths(mutate, path):
    doc = ring_doc(6)
    mutate(doc)
    with pytest.raises(ConfigError) as exc:
        load_topology(doc)
    assert exc.value.path == path


def test_route_adjacent():
    topo = load_topology(ring_doc(6))
    assert route(topo, "v0", "v1") == ["v0", "v1"]


def test_route_ring_opposite_matches_oracle():
    topo = load_topology(ring_doc(6))
    got = route(topo, "v0", "v3")
    assert len(got) == 4
    assert got == oracle_route(topo, "v0", "v3") == ["v0", "v1", "v2", "v3"]
    # From the other side the lexicographically smaller sequence goes through v2.
    assert route(topo, "v3", "v0") == oracle_route(topo, "v3", "v0") == ["v3", "v2", "v1", "v0"]


def test_route_unreachable():
    topo = Topology([Node("a"), Node("b"), Node("c")], [Link("a-b", "a", "b", 1.0)])
    with pytest.raises(NoRoute):
        route(topo, "a", "c")
    with pytest.raises(NoRoute):
        route(load_topology(ring_doc(6)), "v0", "v3", exclude={"v1", "v5"})


def test_route_unknown_node():
    with pytest.raises(InvalidInput):
        route(load_topology(ring_doc(4)), "v0", "nope")


@st.composite
def random_graphs(draw):
    n = draw(st.integers(2, 7))
    pairs = list(itertools.combinations(range(n), 2))
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs)))
    nodes = [Node(f"x{i}") for i in range(n)]
    links = [Link(f"x{a}-x{b}", f"x{a}", f"x{b}", 1.0) for a, b in chosen]
    src, dst = draw(st.lists(st.integers(0, n - 1), min_size=2, max_size=2, unique=True))
    return Topology(nodes, links), f"x{src}", f"x{dst}"


@settings(max_examples=200, deadline=None)
@given(random_graphs())
def test_route_matches_bruteforce(case):
    topo, src, dst = case
    expected = oracle_route(topo, src, dst)
    if expected is None:
        with pytest.raises(NoRoute):
            route(topo, src, dst)
    else:
        assert route(topo, src, dst) == expected


def states_for(topo):
    return {lid: LinkState(l) for lid, l in topo.links.items()}


def test_first_fit_empty_network():
    topo = load_topology(ring_doc(6))
    states = states_for(topo)
    path = topo.path_links(["v0", "v1", "v2"])
    assert assign_wavelength(states, path, "TDCh") == 0
    assert states["v0-v1"].occupied("TDCh") == 1 and states["v1-v2"].occupied("TDCh") == 1


def test_first_fit_skips_busy_index():
    topo = load_topology(ring_doc(6))
    states = states_for(topo)
    assign_wavelength(states, topo.path_links(["v1", "v2"]), "TDCh")
    assert assign_wavelength(states, topo.path_links(["v0", "v1", "v2"]), "TDCh") == 1


def test_continuity_constraint():
    topo = load_topology(ring_doc(6))
    states = states_for(topo)
    states["v0-v1"].busy["TDCh"][0] = True
    states["v1-v2"].busy["TDCh"][1] = True
    assert assign_wavelength(states, topo.path_links(["v0", "v1", "v2"]), "TDCh") == 2


def test_all_busy_blocks_without_debit():
    topo = load_topology(ring_doc(6))
    states = states_for(topo)
    for _ in range(4):
        assign_wavelength(states, topo.path_links(["v1", "v2"]), "TDCh")
    before = {lid: s.snapshot() for lid, s in states.items()}
    with pytest.raises(NoWavelength):
        assign_wavelength(states, topo.path_links(["v0", "v1", "v2"]), "TDCh")
    assert {lid: s.snapshot() for lid, s in states.items()} == before


def test_release_restores_and_rejects_double_free():
    topo = load_topology(ring_doc(6))
    states = states_for(topo)
    path = topo.path_links(["v0", "v1"])
    before = states["v0-v1"].snapshot()
    w = assign_wavelength(states, path, "QSCh")
    release_wavelength(states, path, "QSCh", w)
    assert states["v0-v1"].snapshot() == before
    with pytest.raises(InvalidInput):
        release_wavelength(states, path, "QSCh", w)
