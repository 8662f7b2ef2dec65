"""Optical topology: nodes, multi-class links, routing and wavelength assignment."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, InvalidInput, NoRoute, NoWavelength

CHANNEL_CLASSES = ("QSCh", "PICh", "BCCh", "TDCh")
NODE_ROLES = ("controller", "dcn", "qkd-endpoint")
SPEED_IN_FIBER_KM_S = 2.0e5


@dataclass(frozen=True)
class Node:
    id: str
    roles: frozenset = frozenset()

    @property
    def is_controller(self) -> bool:
        return "controller" in self.roles

    @property
    def is_qkd_endpoint(self) -> bool:
        return "qkd-endpoint" in self.roles


@dataclass(frozen=True)
class Link:
    id: str
    a: str
    b: str
    length_km: float
    wavelengths: Mapping[str, int] = field(default_factory=dict)

    @property
    def endpoints(self) -> tuple[str, str]:
        return (self.a, self.b)

    def count(self, channel_class: str) -> int:
        return int(self.wavelengths.get(channel_class, 0))

    def other(self, node: str) -> str:
        return self.b if node == self.a else self.a

    @property
    def delay(self) -> float:
        return self.length_km / SPEED_IN_FIBER_KM_S


class Topology:
    def __init__(self, nodes: Iterable[Node], links: Iterable[Link]):
        self.nodes: dict[str, Node] = {n.id: n for n in nodes}
        self.links: dict[str, Link] = {}
        self._by_pair: dict[frozenset, Link] = {}
        self.adjacency: dict[str, list[str]] = {n: [] for n in self.nodes}
        for link in links:
            self.links[link.id] = link
            self._by_pair[frozenset(link.endpoints)] = link
            self.adjacency[link.a].append(link.b)
            self.adjacency[link.b].append(link.a)
        for nbrs in self.adjacency.values():
            nbrs.sort()

    def link_between(self, a: str, b: str) -> Link | None:
        return self._by_pair.get(frozenset((a, b)))

    def path_links(self, path: Sequence[str]) -> list[Link]:
        links = []
        for a, b in zip(path[:-1], path[1:]):
            link = self.link_between(a, b)
            if link is None:
                raise InvalidInput(f"no link between {a} and {b}")
            links.append(link)
        return links

    def controllers(self) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.is_controller)

    def is_connected(self) -> bool:
        if not self.nodes:
            return False
        start = next(iter(sorted(self.nodes)))
        seen = {start}
        todo = deque([start])
        while todo:
            u = todo.popleft()
            for v in self.adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    todo.append(v)
        return len(seen) == len(self.nodes)


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def load_topology(document: Mapping) -> Topology:
    """Build a validated :class:`Topology` from the ``topology`` section of a scenario."""
    _require(isinstance(document, Mapping), "topology", "must be an object")
    raw_nodes = document.get("nodes")
    _require(isinstance(raw_nodes, list) and raw_nodes, "topology.nodes", "must be a nonempty list")
    nodes = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_nodes):
        where = f"topology.nodes[{i}]"
        _require(isinstance(raw, Mapping), where, "must be an object")
        node_id = raw.get("id")
        _require(isinstance(node_id, str) and node_id != "", f"{where}.id", "must be a nonempty string")
        _require(node_id not in seen, f"{where}.id", f"duplicate node id {node_id!r}")
        seen.add(node_id)
        roles = raw.get("roles", [])
        _require(isinstance(roles, list), f"{where}.roles", "must be a list")
        for j, role in enumerate(roles):
            _require(role in NODE_ROLES, f"{where}.roles[{j}]", f"unknown role {role!r}")
        nodes.append(Node(node_id, frozenset(roles)))

    raw_links = document.get("links", [])
    _require(isinstance(raw_links, list), "topology.links", "must be a list")
    links = []
    pairs: set[frozenset] = set()
    link_ids: set[str] = set()
    for i, raw in enumerate(raw_links):
        where = f"topology.links[{i}]"
        _require(isinstance(raw, Mapping), where, "must be an object")
        ends = raw.get("endpoints")
        _require(
            isinstance(ends, list) and len(ends) == 2 and all(isinstance(e, str) for e in ends),
            f"{where}.endpoints",
            "must be a pair of node ids",
        )
        a, b = ends
        for e in ends:
            _require(e in seen, f"{where}.endpoints", f"link references unknown node {e!r}")
        _require(a != b, f"{where}.endpoints", "self-loop")
        _require(frozenset(ends) not in pairs, f"{where}.endpoints", "parallel links are not supported")
        pairs.add(frozenset(ends))
        link_id = raw.get("id", f"{a}-{b}")
        _require(isinstance(link_id, str) and link_id not in link_ids, f"{where}.id", "must be a unique string")
        link_ids.add(link_id)
        length = raw.get("length_km", 0.0)
        _require(
            isinstance(length, (int, float)) and not isinstance(length, bool) and length >= 0,
            f"{where}.length_km",
            "must be a non-negative number",
        )
        wl = raw.get("wavelengths", {})
        _require(isinstance(wl, Mapping), f"{where}.wavelengths", "must be an object")
        counts = {}
        for cls, count in wl.items():
            _require(cls in CHANNEL_CLASSES, f"{where}.wavelengths.{cls}", "unknown channel class")
            _require(
                isinstance(count, int) and not isinstance(count, bool) and count >= 0,
                f"{where}.wavelengths.{cls}",
                "must be a non-negative integer",
            )
            counts[cls] = count
        if counts.get("QSCh", 0) > 0:
            _require(counts.get("PICh", 0) > 0, f"{where}.wavelengths.PICh", "QSCh requires at least one PICh")
        links.append(Link(link_id, a, b, float(length), counts))

    topo = Topology(nodes, links)
    _require(topo.is_connected(), "topology", "graph is disconnected")
    return topo


def route(
    topology: Topology,
    src: str,
    dst: str,
    *,
    exclude: Iterable[str] = (),
    link_filter=None,
) -> list[str]:
    """Fewest-hop path; ties go to the lexicographically smallest node sequence."""
    for n in (src, dst):
        if n not in topology.nodes:
            raise InvalidInput(f"unknown node {n!r}")
    excluded = set(exclude)
    if src in excluded or dst in excluded:
        raise NoRoute(f"{src} -> {dst}: endpoint unavailable")
    if src == dst:
        return [src]

    def usable(u: str, v: str) -> bool:
        if v in excluded:
            return False
        return link_filter is None or link_filter(topology.link_between(u, v))

    # Distances to dst, then a greedy walk taking the smallest-id neighbour one step closer.
    dist = {dst: 0}
    todo = deque([dst])
    while todo:
        u = todo.popleft()
        for v in topology.adjacency[u]:
            if v not in dist and usable(u, v):
                dist[v] = dist[u] + 1
                todo.append(v)
    if src not in dist:
        raise NoRoute(f"{src} -> {dst}")
    path = [src]
    while path[-1] != dst:
        u = path[-1]
        path.append(min(v for v in topology.adjacency[u] if dist.get(v) == dist[u] - 1 and usable(u, v)))
    return path


class LinkState:
    """Per-class wavelength occupancy of one link."""

    def __init__(self, link: Link):
        self.link = link
        self.busy: dict[str, list[bool]] = {cls: [False] * link.count(cls) for cls in CHANNEL_CLASSES}

    def free(self, channel_class: str) -> int:
        return self.busy[channel_class].count(False)

    def occupied(self, channel_class: str) -> int:
        return self.busy[channel_class].count(True)

    def snapshot(self) -> dict:
        return {cls: tuple(v) for cls, v in self.busy.items()}

    def restore(self, snap: dict) -> None:
        self.busy = {cls: list(v) for cls, v in snap.items()}


def assign_wavelength(link_states: Mapping[str, LinkState], path_links: Sequence[Link], channel_class: str) -> int:
    """First-fit index free on every link of the path; marks it busy."""
    if channel_class not in CHANNEL_CLASSES:
        raise InvalidInput(f"unknown channel class {channel_class!r}")
    states = [link_states[link.id] for link in path_links]
    if not states:
        raise InvalidInput("empty path")
    width = min(len(s.busy[channel_class]) for s in states)
    for index in range(width):
        if not any(s.busy[channel_class][index] for s in states):
            for s in states:
                s.busy[channel_class][index] = True
            return index
    raise NoWavelength(f"no common free {channel_class} wavelength on {[l.id for l in path_links]}")


def release_wavelength(link_states: Mapping[str, LinkState], path_links: Sequence[Link], channel_class: str, index: int) -> None:
    for link in path_links:
        busy = link_states[link.id].busy[channel_class]
        if not busy[index]:
            raise InvalidInput(f"{channel_class}[{index}] on {link.id} is already free")
        busy[index] = False
