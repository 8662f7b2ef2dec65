"""Scripted attacks: eavesdropping, sybil identities, ledger tampering and node failure.

Every attack runs as an ordinary AttackTrigger event on the simulation
timeline. The functions here only mutate the network state; detection is
left to the protocol code, so the counters they bump record what was tried,
not what was caught.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import AttackSpec
from .consensus import ConsensusMessage, Phase
from .engine import EventKind
from .errors import ConfigError
from .ledger import Transaction, TxKind, audit_chain, tamper_ledger, tamperable_bits
from .network import NetworkState
from .qcrypto import Tag


@dataclass(frozen=True)
class SybilBurst:
    """One round of fabricated traffic from every sybil identity."""

    ids: tuple[str, ...]
    interval: float
    until: float


def inject_eavesdropper(link: str, fraction: float, network_state: NetworkState, *, where: str = "link") -> None:
    if link not in network_state.topology.links:
        raise ConfigError(where, f"unknown link {link!r}")
    if link not in network_state.qkd_links:
        raise ConfigError(where, f"link {link!r} carries no quantum channel")
    ql = network_state.qkd_links[link]
    network_state.set_channel(link, replace(ql.channel, eavesdrop_fraction=float(fraction)))
    network_state.counters["eavesdrop_attacks"] += 1


def _random_tags(state: NetworkState, claimed_sender: str, recipients, tag_length: int, rng) -> dict:
    """Guess tags; offsets fall inside already-used key when the claimed pair has a pool."""
    tags = {}
    for r in recipients:
        pool = state.e2e_pools.get(claimed_sender, r)
        limit = pool.consumed if pool is not None and pool.consumed > 0 else 1 << 20
        tags[r] = Tag(int(rng.integers(0, limit)), tag_length, int(rng.integers(0, 1 << tag_length)))
    return tags


def sybil_burst(burst: SybilBurst, network_state: NetworkState) -> None:
    state = network_state
    now = state.queue.now
    rng = state.rng["adversary"]
    validators = state.validators
    tx_tag = state.scenario.crypto.tx_tag_bits
    msg_tag = state.scenario.crypto.consensus_tag_bits
    for sybil in burst.ids:
        seq = state.counters["sybil_transactions"]
        # Half the fabrications claim a real controller as sender.
        claimed = sybil if seq % 2 == 0 else validators[int(rng.integers(0, len(validators)))]
        recipients = [v for v in validators if v != claimed]
        tx = Transaction(
            f"sybil-tx-{seq}",
            claimed,
            bytes(rng.integers(0, 256, 16, dtype=np.uint8)),
            int(round(now * 1e6)),
            _random_tags(state, claimed, recipients, tx_tag, rng),
            TxKind.LIGHTPATH_ESTABLISH,
        )
        state.counters["sybil_transactions"] += 1
        state.sybil_tx_ids.add(tx.id)
        state.cluster.submit(tx, now, authenticate=True, origin=sybil)

        target = validators[int(rng.integers(0, len(validators)))]
        round_ = state.cluster.nodes[target].round
        phase = Phase(int(rng.integers(0, 3)))
        msg = ConsensusMessage(
            round_,
            phase,
            bytes(rng.integers(0, 256, 32, dtype=np.uint8)),
            claimed,
            _random_tags(state, claimed, recipients, msg_tag, rng),
            forged=True,
        )
        state.counters["sybil_messages"] += len(msg.tags)
        state.cluster.inject(msg, now)
    nxt = now + burst.interval
    if nxt <= burst.until:
        state.queue.schedule(nxt, EventKind.ATTACK_TRIGGER, burst)


def inject_sybil(count: int, network_state: NetworkState, *, interval: float = 1.0, until: float | None = None) -> tuple:
    if not isinstance(count, int) or count < 1:
        raise ConfigError("count", "at least one sybil node is required")
    state = network_state
    start = len(state.sybils)
    ids = tuple(f"sybil-{start + k}" for k in range(count))
    state.sybils.extend(ids)
    until = state.scenario.horizon if until is None else until
    sybil_burst(SybilBurst(ids, interval, until), state)
    return ids


def tamper_block(node: str, height: int, bit_position: int, network_state: NetworkState) -> int | None:
    """Flip one stored bit; the victim audits itself and stops if the audit fails."""
    state = network_state
    cnode = state.cluster.nodes.get(node)
    if cnode is None:
        raise ConfigError("node", f"{node!r} holds no ledger")
    ledger = cnode.ledger
    if not 0 <= height <= ledger.height:
        raise ConfigError("height", f"{node} has no block at height {height} (tip is {ledger.height})")
    width = tamperable_bits(ledger.chain[height])
    if not 0 <= bit_position < width:
        raise ConfigError("bit", f"bit position must lie in [0, {width})")
    tamper_ledger(ledger, height, bit_position)
    found = audit_chain(ledger)
    state.tampered[node] = (height, found)
    state.counters["tamper_events"] += 1
    if found is not None and found <= height + 1:
        state.counters["tamper_detected"] += 1
    if found is not None:
        # A replica that fails its own audit stops voting instead of spreading bad state.
        state.cluster.crash(node)
    return found


def fail_node(node: str, network_state: NetworkState) -> None:
    if node not in network_state.topology.nodes:
        raise ConfigError("node", f"unknown node {node!r}")
    network_state.fail_node(node)


def trigger(payload, network_state: NetworkState) -> str:
    """Run one AttackTrigger payload; returns a short description for the trace."""
    if isinstance(payload, SybilBurst):
        sybil_burst(payload, network_state)
        return f"kind=SybilBurst nodes={len(payload.ids)}"
    spec: AttackSpec = payload
    p = spec.params
    try:
        if spec.kind == "Eavesdrop":
            inject_eavesdropper(p["link"], p["fraction"], network_state)
            return f"kind=Eavesdrop link={p['link']} fraction={p['fraction']}"
        if spec.kind == "Sybil":
            ids = inject_sybil(p["count"], network_state, interval=p["interval"])
            return f"kind=Sybil nodes={len(ids)}"
        if spec.kind == "TamperLedger":
            found = tamper_block(p["node"], p["height"], p["bit"], network_state)
            return f"kind=TamperLedger node={p['node']} height={p['height']} audit={found}"
        if spec.kind == "NodeFailure":
            fail_node(p["node"], network_state)
            return f"kind=NodeFailure node={p['node']}"
    except ConfigError as exc:
        raise ConfigError(f"{spec.path}.{exc.path}", exc.message) from exc
    raise ConfigError(f"{spec.path}.kind", f"unknown attack kind {spec.kind!r}")
