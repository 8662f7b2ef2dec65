"""Network state shared by the five planes, and the lightpath provisioning workflow.

A request is routed and given a TDCh wavelength (data plane), secured with
relayed QKD key if it asks for security (QKD plane), and recorded as a
LightpathEstablish transaction that the controllers agree on (blockchain and
control planes). Anything that fails before the transaction is submitted
rolls the state back to its pre-attempt snapshot.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bits import random_bits
from .config import Scenario
from .consensus import Committed, ConsensusCluster
from .engine import EventKind, EventQueue
from .errors import (
    InternalError,
    InvalidInput,
    InvariantViolation,
    KeyStarved,
    NoRoute,
    NoWavelength,
    RelayFailed,
    TransactionFailed,
)
from .ledger import Transaction, TxKind, make_transaction
from .qcrypto import KeyPools, mac_material_length, relay_key
from .qkd import ChannelModel, SessionOutcome, run_session
from .topology import CHANNEL_CLASSES, Link, LinkState, assign_wavelength, release_wavelength, route

BLOCK_REASONS = ("NoRoute", "NoWavelength", "KeyStarved")
TX_DIGEST_BITS = 256
RNG_STREAMS = ("traffic", "qkd", "crypto", "latency", "adversary")


@dataclass(frozen=True)
class LightpathRequest:
    id: int
    source: str
    destination: str
    required_key_bits: int
    holding_time: float
    arrival_time: float
    security_required: bool

    def __post_init__(self):
        if self.source == self.destination:
            raise InvalidInput("source and destination must differ")
        if not self.holding_time > 0:
            raise InvalidInput("holding_time must be positive")
        if self.required_key_bits < 0:
            raise InvalidInput("required_key_bits must be non-negative")


@dataclass(frozen=True)
class ProvisionResult:
    status: str  # "Established" or "Blocked"
    path: tuple = ()
    wavelengths: dict = field(default_factory=dict)
    reason: str | None = None
    ledger_tx: str | None = None

    @property
    def established(self) -> bool:
        return self.status == "Established"


@dataclass
class Lightpath:
    id: int
    request: LightpathRequest
    path: tuple
    link_ids: tuple
    wavelength: int
    establish_tx: str
    submitted_at: float
    committed_at: float | None = None
    released_at: float | None = None
    release_tx: str | None = None


@dataclass(frozen=True)
class ReleaseRecord:
    lightpath_id: int
    tx_id: str
    queued: bool  # True when key shortage deferred the transaction


@dataclass
class QkdLink:
    link: Link
    channel: ChannelModel
    busy: bool = False
    reserved: tuple | None = None  # (QSCh index, PICh index) while a session runs
    session_channel: ChannelModel | None = None
    next_allowed: float = 0.0
    wake_pending: bool = False
    sessions: int = 0
    aborted: int = 0
    eavesdrop_aborts: int = 0
    interrupted: int = 0
    key_bits: int = 0
    qber_sum: float = 0.0
    qber_max: float = 0.0


def establish_tx_id(request_id: int) -> str:
    return f"establish-{request_id}"


def release_tx_id(request_id: int) -> str:
    return f"release-{request_id}"


class NetworkState:
    def __init__(self, scenario: Scenario, seed: int, queue: EventQueue | None = None):
        self.scenario = scenario
        self.topology = scenario.topology
        self.queue = queue if queue is not None else EventQueue()
        streams = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
        self.rng = {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, streams)}
        self.link_states = {lid: LinkState(link) for lid, link in sorted(self.topology.links.items())}
        self.link_pools = KeyPools()
        self.e2e_pools = KeyPools()
        self.qkd_links: dict[str, QkdLink] = {}
        for lid, link in sorted(self.topology.links.items()):
            ends = (self.topology.nodes[link.a], self.topology.nodes[link.b])
            if link.count("QSCh") > 0 and all(n.is_qkd_endpoint for n in ends):
                pool = self.link_pools.ensure(link.a, link.b)
                if scenario.crypto.bootstrap_bits:
                    pool.deposit(random_bits(self.rng["crypto"], scenario.crypto.bootstrap_bits))
                self.qkd_links[lid] = QkdLink(link, scenario.qkd.channel_for(lid))
        self.validators = list(scenario.validators)
        self.failed: set[str] = set()
        self.tampered: dict[str, tuple[int, int | None]] = {}  # node -> (height, audit result)
        self.sybils: list[str] = []
        self.sybil_tx_ids: set[str] = set()
        self.lightpaths: dict[int, Lightpath] = {}
        self.deferred_releases: list[int] = []
        self.tx_lightpath: dict[str, int] = {}
        self.first_commit: dict[str, float] = {}
        self.counters: Counter = Counter()
        self._key_routes: dict[tuple, list | None] = {}
        self._control_delay: dict[tuple, float | None] = {}
        cc = scenario.consensus
        self.cluster = ConsensusCluster(
            self.validators,
            self.e2e_pools,
            self.queue,
            tag_length=scenario.crypto.consensus_tag_bits,
            timeout=cc.timeout,
            block_interval=cc.block_interval,
            max_block_txs=cc.max_block_txs,
            latency=self.latency,
            key_hook=self.top_up,
            on_commit=self._on_commit,
        )

    # -- snapshots ------------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "links": {lid: s.snapshot() for lid, s in self.link_states.items()},
            "link_pools": self.link_pools.snapshot(),
            "e2e_pools": self.e2e_pools.snapshot(),
            "lightpaths": set(self.lightpaths),
            "tx_lightpath": dict(self.tx_lightpath),
        }

    def restore(self, snap: dict) -> None:
        for lid, s in snap["links"].items():
            self.link_states[lid].restore(s)
        self.link_pools.restore(snap["link_pools"])
        self.e2e_pools.restore(snap["e2e_pools"])
        for lp_id in set(self.lightpaths) - snap["lightpaths"]:
            del self.lightpaths[lp_id]
        self.tx_lightpath = dict(snap["tx_lightpath"])

    def fingerprint(self) -> str:
        """Digest of every resource a provisioning attempt may touch."""
        h = hashlib.sha256()
        for lid, s in self.link_states.items():
            h.update(lid.encode())
            for cls in CHANNEL_CLASSES:
                h.update(bytes(s.busy[cls]))
        for pools in (self.link_pools, self.e2e_pools):
            for pool in pools:
                h.update(repr((pool.pair, pool.deposited, pool.consumed)).encode())
                h.update(bytes(pool.buffer))
        h.update(json.dumps(sorted(self.lightpaths)).encode())
        return h.hexdigest()

    # -- invariants -----------------------------------------------------------

    def check_conservation(self) -> None:
        """Occupied wavelengths must match exactly what live lightpaths and sessions hold."""
        expected = {lid: {cls: set() for cls in CHANNEL_CLASSES} for lid in self.link_states}
        for lp in self.lightpaths.values():
            if lp.released_at is None:
                for lid in lp.link_ids:
                    expected[lid]["TDCh"].add(lp.wavelength)
        for lid, ql in self.qkd_links.items():
            if ql.reserved is not None:
                expected[lid]["QSCh"].add(ql.reserved[0])
                expected[lid]["PICh"].add(ql.reserved[1])
        for lid, state in self.link_states.items():
            for cls in CHANNEL_CLASSES:
                busy = {i for i, b in enumerate(state.busy[cls]) if b}
                if busy != expected[lid][cls]:
                    raise InvariantViolation(f"{lid} {cls}: occupied {sorted(busy)}, accounted {sorted(expected[lid][cls])}")
                if len(state.busy[cls]) != state.link.count(cls):
                    raise InvariantViolation(f"{lid} {cls}: wavelength count changed")

    # -- latency and routing helpers -----------------------------------------

    def _invalidate_routes(self) -> None:
        self._key_routes.clear()
        self._control_delay.clear()

    def key_route(self, a: str, b: str) -> list | None:
        """Trusted-relay path between two nodes over live QKD links."""
        pair = (a, b)
        if pair not in self._key_routes:
            try:
                path = route(
                    self.topology, a, b, exclude=self.failed, link_filter=lambda link: link.id in self.qkd_links
                )
            except NoRoute:
                path = None
            self._key_routes[pair] = path
        return self._key_routes[pair]

    def _base_delay(self, a: str, b: str) -> float | None:
        pair = (a, b)
        if pair not in self._control_delay:
            cc = self.scenario.consensus
            if a not in self.topology.nodes or b not in self.topology.nodes:
                delay = cc.processing_delay  # fabricated identities sit next to their target
            else:
                try:
                    path = route(
                        self.topology, a, b, exclude=self.failed, link_filter=lambda link: link.count("BCCh") > 0
                    )
                    links = self.topology.path_links(path)
                    delay = sum(link.delay for link in links) + len(links) * cc.processing_delay
                except NoRoute:
                    delay = None
            self._control_delay[pair] = delay
        return self._control_delay[pair]

    def latency(self, a: str, b: str) -> float | None:
        base = self._base_delay(a, b)
        if base is None:
            return None
        jitter = self.scenario.consensus.jitter
        return base + (float(self.rng["latency"].uniform(0.0, jitter)) if jitter > 0 else 0.0)

    # -- key management -------------------------------------------------------

    def top_up(self, sender: str, recipients: Sequence[str], need: int) -> None:
        """Refill end-to-end controller pools from the link pools when they run low."""
        crypto = self.scenario.crypto
        for r in recipients:
            if r in self.failed or sender in self.failed or r not in self.topology.nodes:
                continue
            pool = self.e2e_pools.get(sender, r)
            if pool is not None and pool.remaining >= max(need, crypto.e2e_watermark_bits):
                continue
            path = self.key_route(sender, r)
            if path is None:
                continue
            hops = [self.link_pools.get(a, b) for a, b in zip(path[:-1], path[1:])]
            amount = min(crypto.e2e_refill_bits, min(p.remaining for p in hops))
            have = pool.remaining if pool is not None else 0
            if have + amount < need or amount <= 0:
                self.counters["e2e_starved"] += 1
                continue
            key = relay_key(path, self.link_pools, amount)
            self.e2e_pools.ensure(sender, r).deposit(key)
            self.counters["e2e_refills"] += 1
            self.counters["e2e_refill_bits"] += amount

    def _alive_validators(self) -> list[str]:
        return [v for v in self.validators if v not in self.failed and not self.cluster.nodes[v].crashed]

    def submitter_for(self, request_id: int, source: str | None = None) -> str:
        alive = self._alive_validators()
        if not alive:
            raise NoRoute("no controller available")
        if source in alive:
            return source
        return alive[request_id % len(alive)]

    def make_tx(self, sender: str, payload: bytes, kind: TxKind, tx_id: str, now: float) -> Transaction:
        verifiers = [v for v in self._alive_validators() if v != sender]
        if not verifiers:
            raise NoRoute("no verifying controller available")
        tag_bits = self.scenario.crypto.tx_tag_bits
        need = len(payload) * 8 + mac_material_length(TX_DIGEST_BITS, tag_bits)
        self.top_up(sender, verifiers, need)
        try:
            return make_transaction(
                payload,
                sender,
                verifiers,
                self.e2e_pools,
                int(round(now * 1e6)),
                kind=kind,
                tx_id=tx_id,
                tag_length=tag_bits,
                rng=self.rng["crypto"],
            )
        except TransactionFailed as exc:
            raise KeyStarved((sender,), need, 0) from exc

    # -- provisioning ---------------------------------------------------------

    def provision(self, request: LightpathRequest) -> ProvisionResult:
        now = self.queue.now
        snap = self.snapshot()
        try:
            result = self._provision(request, now)
        except (NoRoute, NoWavelength, KeyStarved) as exc:
            self.restore(snap)
            reason = type(exc).__name__
            self.counters[f"blocked_{reason}"] += 1
            return ProvisionResult("Blocked", reason=reason)
        self.counters["established"] += 1
        return result

    def _provision(self, request: LightpathRequest, now: float) -> ProvisionResult:
        if request.id in self.lightpaths:
            raise InternalError(f"request {request.id} provisioned twice")
        path = route(self.topology, request.source, request.destination, exclude=self.failed)
        links = self.topology.path_links(path)
        wavelength = assign_wavelength(self.link_states, links, "TDCh")
        if request.security_required and request.required_key_bits > 0:
            try:
                relay_key(path, self.link_pools, request.required_key_bits)
            except RelayFailed as exc:
                raise KeyStarved(exc.hop, request.required_key_bits, 0) from exc
        sender = self.submitter_for(request.id, request.source)
        tx_id = establish_tx_id(request.id)
        payload = "|".join(
            [str(request.id), ">".join(path), f"TDCh={wavelength}", f"secure={int(request.security_required)}"]
        ).encode()
        tx = self.make_tx(sender, payload, TxKind.LIGHTPATH_ESTABLISH, tx_id, now)
        self.lightpaths[request.id] = Lightpath(
            request.id, request, tuple(path), tuple(l.id for l in links), wavelength, tx_id, now
        )
        self.tx_lightpath[tx_id] = request.id
        self.cluster.submit(tx, now, authenticate=True)
        return ProvisionResult("Established", tuple(path), {"TDCh": wavelength}, None, tx_id)

    def release(self, lightpath_id: int) -> ReleaseRecord:
        now = self.queue.now
        lp = self.lightpaths.get(lightpath_id)
        if lp is None or lp.released_at is not None:
            raise InternalError(f"lightpath {lightpath_id} is not established")
        release_wavelength(self.link_states, self.topology.path_links(lp.path), "TDCh", lp.wavelength)
        lp.released_at = now
        lp.release_tx = release_tx_id(lp.id)
        self.tx_lightpath[lp.release_tx] = lp.id
        self.counters["released"] += 1
        queued = not self._submit_release(lp, now)
        if queued:
            self.deferred_releases.append(lp.id)
        return ReleaseRecord(lp.id, lp.release_tx, queued)

    def _submit_release(self, lp: Lightpath, now: float) -> bool:
        try:
            sender = self.submitter_for(lp.id, lp.request.source)
            tx = self.make_tx(sender, str(lp.id).encode(), TxKind.LIGHTPATH_RELEASE, lp.release_tx, now)
        except (KeyStarved, NoRoute):
            return False
        self.cluster.submit(tx, now, authenticate=True)
        return True

    def retry_deferred(self) -> None:
        now = self.queue.now
        pending, self.deferred_releases = self.deferred_releases, []
        for lp_id in pending:
            if not self._submit_release(self.lightpaths[lp_id], now):
                self.deferred_releases.append(lp_id)

    def _on_commit(self, event: Committed) -> None:
        for tx in event.block.transactions:
            if tx.id in self.first_commit:
                continue
            self.first_commit[tx.id] = event.time
            lp_id = self.tx_lightpath.get(tx.id)
            if lp_id is not None and tx.id == establish_tx_id(lp_id):
                lp = self.lightpaths[lp_id]
                lp.committed_at = event.time
                # Data-plane transport starts once the establishment is on the ledger.
                self.queue.schedule(event.time + lp.request.holding_time, EventKind.DEPARTURE, lp_id)

    # -- QKD plane ------------------------------------------------------------

    def replenish(self) -> None:
        """Start a QKD session on every idle hop whose pool sits below the watermark."""
        qkd = self.scenario.qkd
        if qkd.qubit_rate <= 0:
            return
        now = self.queue.now
        for lid, ql in self.qkd_links.items():
            if ql.busy or ql.link.a in self.failed or ql.link.b in self.failed:
                continue
            if self.link_pools.get(ql.link.a, ql.link.b).remaining >= qkd.watermark_bits:
                continue
            if now < ql.next_allowed:
                if not ql.wake_pending:
                    ql.wake_pending = True
                    self.queue.schedule(ql.next_allowed, EventKind.QKD_SESSION_DUE, (lid, "wake"))
                continue
            try:
                q = assign_wavelength(self.link_states, [ql.link], "QSCh")
            except NoWavelength:
                continue
            try:
                p = assign_wavelength(self.link_states, [ql.link], "PICh")
            except NoWavelength:
                release_wavelength(self.link_states, [ql.link], "QSCh", q)
                continue
            ql.busy = True
            ql.reserved = (q, p)
            ql.session_channel = ql.channel
            self.queue.schedule(now + qkd.session_duration, EventKind.QKD_SESSION_DUE, (lid, "end"))

    def on_qkd_event(self, link_id: str, what: str) -> SessionOutcome | None:
        ql = self.qkd_links[link_id]
        if what == "wake":
            ql.wake_pending = False
            return None
        q, p = ql.reserved
        release_wavelength(self.link_states, [ql.link], "QSCh", q)
        release_wavelength(self.link_states, [ql.link], "PICh", p)
        ql.busy = False
        ql.reserved = None
        if ql.link.a in self.failed or ql.link.b in self.failed:
            ql.interrupted += 1
            return None
        pool = self.link_pools.get(ql.link.a, ql.link.b)
        outcome = run_session(self.scenario.qkd.session_params, ql.session_channel, self.rng["qkd"], pool)
        ql.sessions += 1
        ql.qber_sum += outcome.qber_estimate
        ql.qber_max = max(ql.qber_max, outcome.qber_estimate)
        if outcome.ok:
            ql.key_bits += outcome.final_length
            self.retry_deferred()
        else:
            ql.aborted += 1
            if outcome.reason == "EavesdropperSuspected":
                ql.eavesdrop_aborts += 1
            ql.next_allowed = self.queue.now + self.scenario.qkd.retry_interval
        return outcome

    # -- faults ---------------------------------------------------------------

    def fail_node(self, node: str) -> None:
        if node in self.failed:
            return
        self.failed.add(node)
        if node in self.cluster.nodes:
            self.cluster.crash(node)
        self._invalidate_routes()
        self.counters["node_failures"] += 1

    def set_channel(self, link_id: str, channel: ChannelModel) -> None:
        self.qkd_links[link_id].channel = channel

    # -- ledger views ---------------------------------------------------------

    def honest_ledger_nodes(self) -> list[str]:
        """Validators that follow the protocol, are up, and hold an untampered replica."""
        return [m for m in self.cluster.honest_ids() if m not in self.failed and m not in self.tampered]


def provision_request(request: LightpathRequest, network_state: NetworkState) -> ProvisionResult:
    return network_state.provision(request)


def release_lightpath(lightpath_id: int, network_state: NetworkState) -> ReleaseRecord:
    return network_state.release(lightpath_id)
