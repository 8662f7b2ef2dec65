"""Round-based BFT consensus with QKD-keyed MACs on every message.

Each round has a rotating leader (``members[round % n]``). The leader
broadcasts a Propose carrying the block; every member that accepts it
broadcasts a Vote; a member that sees a quorum of matching Votes decides,
appends the block and broadcasts a Decide. A member that missed the vote
quorum adopts a decision once ``f + 1`` members report it.

Rounds end on commit or on timeout, after which the next leader proposes.
There are no view-change certificates: safety relies on every message
arriving well inside the round timeout, which the network layer enforces
when it loads a scenario.
"""

from __future__ import annotations

import hashlib
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Iterable, Sequence

import numpy as np

from .bits import bytes_to_bits
from .engine import EventKind, EventQueue, SimEvent
from .errors import InvariantViolation, PoolDesync
from .ledger import (
    Block,
    Ledger,
    Transaction,
    Verdict,
    append_block,
    assemble_block,
    check_own_tag,
    validate_block,
)
from .qcrypto import KeyPools, mac_material_length, sign_transaction, verify_tag

DEFAULT_TAG_LENGTH = 32
DIGEST_BITS = 256


class Phase(IntEnum):
    PROPOSE = 0
    VOTE = 1
    DECIDE = 2


class Fault(str, Enum):
    HONEST = "honest"
    CRASHED = "crashed"
    EQUIVOCATE = "equivocate"  # as leader: different blocks to different peers, never votes


def fault_tolerance(n: int) -> int:
    return (n - 1) // 3


def quorum_size(n: int) -> int:
    """Smallest vote count any two of which overlap in an honest member (2f+1 when n = 3f+1)."""
    return math.ceil((n + fault_tolerance(n) + 1) / 2)


def leader_for(members: Sequence[str], round_: int) -> str:
    return members[round_ % len(members)]


def message_bits(round_: int, phase: Phase, digest: bytes, sender: str) -> np.ndarray:
    data = b"qbft" + struct.pack(">QB", round_, int(phase)) + digest + sender.encode("utf-8")
    return bytes_to_bits(hashlib.sha256(data).digest())


def mac_bits_per_recipient(tag_length: int = DEFAULT_TAG_LENGTH) -> int:
    return mac_material_length(DIGEST_BITS, tag_length)


@dataclass(frozen=True)
class ConsensusMessage:
    round: int
    phase: Phase
    block_digest: bytes
    sender: str
    tags: dict  # recipient -> Tag; also the delivery list
    block: Block | None = None  # bound to the MAC through block_digest
    forged: bool = False  # adversary bookkeeping only, never read by nodes


@dataclass
class RoundState:
    round: int
    leader: str
    proposed: bytes | None = None
    block: Block | None = None
    votes: dict = field(default_factory=dict)  # voter -> digest, first vote wins
    decided: bytes | None = None
    decides: dict = field(default_factory=dict)  # sender -> digest
    timer: float | None = None
    voted: bool = False
    proposal_sent: bool = False
    block_timer: bool = False
    known_blocks: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TimerRequest:
    node: str
    round: int
    deadline: float
    kind: EventKind = EventKind.CONSENSUS_TIMER


@dataclass(frozen=True)
class Committed:
    node: str
    round: int
    block: Block
    time: float
    exchanges: int  # message hops on the critical path (2 via votes, 3 via decides)


class ConsensusNode:
    def __init__(
        self,
        node_id: str,
        members: Sequence[str],
        pools: KeyPools,
        ledger: Ledger | None = None,
        *,
        tag_length: int = DEFAULT_TAG_LENGTH,
        timeout: float = 1.0,
        block_interval: float = 0.0,
        max_block_txs: int = 64,
        key_hook: Callable[[str, Sequence[str], int], None] | None = None,
        fault: Fault = Fault.HONEST,
    ):
        self.id = node_id
        self.members = list(members)
        self.pools = pools
        self.ledger = ledger if ledger is not None else Ledger(node_id)
        self.tag_length = tag_length
        self.timeout = timeout
        self.block_interval = block_interval
        self.max_block_txs = max_block_txs
        self.key_hook = key_hook
        self.fault = fault
        self.round = 0
        self.rounds: dict[int, RoundState] = {}
        self.mempool: dict[str, Transaction] = {}
        self.committed_ids: set[str] = set()
        self.decisions: dict[int, bytes] = {}  # round -> decided digest
        self.stats: Counter = Counter()
        self.round_stats: dict[int, Counter] = {}
        self.forged_accepted = 0

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def quorum(self) -> int:
        return quorum_size(self.n)

    @property
    def crashed(self) -> bool:
        return self.fault is Fault.CRASHED

    @property
    def honest(self) -> bool:
        return self.fault is Fault.HONEST

    def crash(self) -> None:
        self.fault = Fault.CRASHED

    def leader(self, round_: int) -> str:
        return leader_for(self.members, round_)

    def state(self, round_: int) -> RoundState:
        st = self.rounds.get(round_)
        if st is None:
            st = self.rounds[round_] = RoundState(round_, self.leader(round_))
        return st

    def _count(self, round_: int, key: str, k: int = 1) -> None:
        self.stats[key] += k
        self.round_stats.setdefault(round_, Counter())[key] += k

    # -- sending --------------------------------------------------------------

    def _peers(self) -> list[str]:
        return [m for m in self.members if m != self.id]

    def _sign(self, round_, phase, digest, recipients, block=None) -> ConsensusMessage | None:
        """MAC the message for every recipient we still share enough key with."""
        recipients = list(recipients)
        if not recipients:
            return None
        need = mac_bits_per_recipient(self.tag_length)
        if self.key_hook is not None:
            self.key_hook(self.id, recipients, need)
        reachable = []
        for r in recipients:
            pool = self.pools.get(self.id, r)
            if pool is not None and pool.remaining >= need:
                reachable.append(r)
            else:
                self._count(round_, "starved")
        if not reachable:
            return None
        tags = sign_transaction(message_bits(round_, phase, digest, self.id), self.id, reachable, self.pools, self.tag_length)
        self._count(round_, "sent", len(reachable))
        return ConsensusMessage(round_, phase, digest, self.id, tags, block)

    def _broadcast(self, round_, phase, digest, block=None) -> list:
        msg = self._sign(round_, phase, digest, self._peers(), block)
        return [msg] if msg is not None else []

    # -- driving --------------------------------------------------------------

    def submit(self, tx: Transaction, now: float, authenticate: bool = False, origin: str | None = None) -> list:
        """Queue ``tx``; when authenticating, only the true origin skips the tag check."""
        if self.crashed or tx.id in self.committed_ids or tx.id in self.mempool:
            return []
        origin = tx.sender if origin is None else origin
        if authenticate and origin != self.id and not check_own_tag(tx, self.id, self.pools):
            self.stats["tx_rejected"] += 1
            return []
        self.mempool[tx.id] = tx
        return self._kick(now)

    def _kick(self, now: float) -> list:
        if self.crashed or not self.mempool:
            return []
        st = self.state(self.round)
        actions: list = []
        if st.decided is not None:
            return actions
        if st.timer is None:
            st.timer = now + self.block_interval + self.timeout
            actions.append(TimerRequest(self.id, self.round, st.timer))
        if st.leader == self.id and not st.proposal_sent:
            if self.block_interval <= 0 or len(self.mempool) >= self.max_block_txs:
                actions += self.propose(now)
            elif not st.block_timer:
                st.block_timer = True
                actions.append(TimerRequest(self.id, self.round, now + self.block_interval, EventKind.BLOCK_TIMER))
        return actions

    def on_block_timer(self, round_: int, now: float) -> list:
        if self.crashed or round_ != self.round:
            return []
        st = self.state(round_)
        if st.proposal_sent or st.leader != self.id or not self.mempool:
            return []
        return self.propose(now)

    def propose(self, now: float) -> list:
        """Leader step: assemble a block from the mempool and broadcast it."""
        r = self.round
        st = self.state(r)
        if st.leader != self.id or st.proposal_sent or self.crashed:
            return []
        st.proposal_sent = True
        txs = list(self.mempool.values())[: self.max_block_txs]
        verdicts = {tx.id: Verdict.ACCEPT for tx in txs}
        t_us = int(round(now * 1e6))
        block = assemble_block(txs, self.ledger.tip, t_us, verdicts)
        self._count(r, "proposals")
        if self.fault is Fault.EQUIVOCATE:
            other = assemble_block(txs, self.ledger.tip, t_us + 1, verdicts)
            peers = self._peers()
            half = (len(peers) + 1) // 2
            actions = []
            for blk, group in ((block, peers[:half]), (other, peers[half:])):
                msg = self._sign(r, Phase.PROPOSE, blk.hash, group, blk)
                if msg is not None:
                    actions.append(msg)
            return actions
        actions = self._broadcast(r, Phase.PROPOSE, block.hash, block)
        reached = len(actions[0].tags) if actions else 0
        if reached + 1 < self.quorum:
            self._count(r, "starved_proposals")
            return []  # cannot reach a quorum; the round will time out
        st.proposed = block.hash
        st.block = block
        st.known_blocks[block.hash] = block
        st.voted = True
        actions += self._broadcast(r, Phase.VOTE, block.hash)
        actions += self._record_vote(r, self.id, block.hash, now, exchanges=2)
        return actions

    def on_timer(self, round_: int, now: float) -> list:
        if self.crashed or round_ != self.round or self.state(round_).decided is not None:
            return []
        self._count(round_, "timeouts")
        self.round = round_ + 1
        return self._kick(now)

    # -- receiving ------------------------------------------------------------

    def handle(self, msg: ConsensusMessage, now: float) -> list:
        if self.crashed:
            return []
        tag = msg.tags.get(self.id)
        if tag is None or msg.sender == self.id:
            self._count(msg.round, "dropped")
            return []
        try:
            ok = verify_tag(
                message_bits(msg.round, msg.phase, msg.block_digest, msg.sender), tag, self.id, msg.sender, self.pools
            )
        except PoolDesync:
            self._count(msg.round, "desync")
            ok = False
        if not ok:
            self._count(msg.round, "dropped")
            self._count(msg.round, "forged_rejected")
            return []
        if msg.forged:
            self.forged_accepted += 1
        if not self.honest:
            # Faulty nodes still learn outcomes so their mempools drain.
            return self._on_decide(msg, now) if msg.phase is Phase.DECIDE else []
        if msg.phase is Phase.PROPOSE:
            return self._on_propose(msg, now)
        if msg.phase is Phase.VOTE:
            if msg.round < self.round:
                return []
            return self._record_vote(msg.round, msg.sender, msg.block_digest, now, exchanges=2)
        return self._on_decide(msg, now)

    def _block_acceptable(self, block: Block) -> bool:
        if validate_block(self.ledger, block) is not None:
            return False
        for tx in block.transactions:
            if tx.id in self.committed_ids:
                return False
            if tx.sender != self.id and self.id in tx.tags and not check_own_tag(tx, self.id, self.pools):
                return False
        return True

    def _on_propose(self, msg: ConsensusMessage, now: float) -> list:
        r = msg.round
        if r < self.round or msg.sender != self.leader(r):
            return []
        st = self.state(r)
        if st.voted or st.decided is not None:
            return []
        block = msg.block
        if block is None or block.hash != msg.block_digest or not self._block_acceptable(block):
            self._count(r, "invalid_proposals")
            return []
        if r > self.round:
            self.round = r
        st.proposed = block.hash
        st.block = block
        st.known_blocks[block.hash] = block
        st.voted = True
        actions = self._broadcast(r, Phase.VOTE, block.hash)
        if st.timer is None:
            st.timer = now + self.timeout
            actions.append(TimerRequest(self.id, r, st.timer))
        return actions + self._record_vote(r, self.id, block.hash, now, exchanges=2)

    def _record_vote(self, r: int, voter: str, digest: bytes, now: float, exchanges: int) -> list:
        st = self.state(r)
        if voter in st.votes:
            self._count(r, "duplicate_votes")
            return []
        st.votes[voter] = digest
        if st.decided is not None:
            return []
        support = sum(1 for d in st.votes.values() if d == digest)
        if support >= self.quorum:
            return self._decide(r, digest, now, exchanges)
        return []

    def _decide(self, r: int, digest: bytes, now: float, exchanges: int) -> list:
        st = self.state(r)
        st.decided = digest
        self.decisions[r] = digest
        block = st.known_blocks.get(digest)
        actions = self._broadcast(r, Phase.DECIDE, digest, block)
        if block is not None:
            actions += self._commit(r, block, now, exchanges)
        return actions

    def _on_decide(self, msg: ConsensusMessage, now: float) -> list:
        r = msg.round
        st = self.state(r)
        if msg.sender in st.decides:
            return []
        st.decides[msg.sender] = msg.block_digest
        if msg.block is not None and msg.block.hash == msg.block_digest:
            st.known_blocks.setdefault(msg.block_digest, msg.block)
        digest = msg.block_digest
        block = st.known_blocks.get(digest)
        if block is None:
            return []
        if self._already_has(block):
            return []
        if st.decided == digest:
            return self._commit(r, block, now, exchanges=3)
        if st.decided is None:
            support = sum(1 for d in st.decides.values() if d == digest)
            if support >= fault_tolerance(self.n) + 1:
                st.decided = digest
                self.decisions[r] = digest
                return self._commit(r, block, now, exchanges=3)
        return []

    def _already_has(self, block: Block) -> bool:
        h = block.height
        if h < len(self.ledger.chain):
            if self.ledger.chain[h].hash != block.hash:
                raise InvariantViolation(
                    f"{self.id}: decided block at height {h} conflicts with committed block"
                )
            return True
        return False

    def _commit(self, r: int, block: Block, now: float, exchanges: int) -> list:
        if self._already_has(block):
            return []
        problem = validate_block(self.ledger, block)
        if problem is not None:
            raise InvariantViolation(f"{self.id} cannot append decided block of round {r}: {problem}")
        append_block(self.ledger, block)
        for tx in block.transactions:
            self.committed_ids.add(tx.id)
            self.mempool.pop(tx.id, None)
        self._count(r, "commits")
        if self.round <= r:
            self.round = r + 1
        return [Committed(self.id, r, block, now, exchanges)] + self._kick(now)


@dataclass
class RoundMetrics:
    round: int
    leader: str
    proposed_at: float | None = None
    committed_at: float | None = None
    sent: int = 0
    dropped: int = 0
    forged_rejected: int = 0
    timed_out: bool = False

    @property
    def latency(self) -> float | None:
        if self.proposed_at is None or self.committed_at is None:
            return None
        return self.committed_at - self.proposed_at


@dataclass
class ConsensusOutcome:
    round: int
    digest: bytes | None
    committed: list[str]
    stale: list[str]
    latency: float | None


class ConsensusCluster:
    """Delivers messages and timers between consensus nodes over an event queue."""

    def __init__(
        self,
        members: Sequence[str],
        pools: KeyPools,
        queue: EventQueue | None = None,
        *,
        tag_length: int = DEFAULT_TAG_LENGTH,
        timeout: float = 1.0,
        block_interval: float = 0.0,
        max_block_txs: int = 64,
        latency: Callable[[str, str], float] | None = None,
        key_hook=None,
        faults: dict | None = None,
        on_commit: Callable[[Committed], None] | None = None,
    ):
        self.members = list(members)
        self.pools = pools
        self.queue = queue if queue is not None else EventQueue()
        self.latency = latency or (lambda a, b: 0.001)
        self.on_commit = on_commit
        faults = faults or {}
        self.nodes = {
            m: ConsensusNode(
                m,
                self.members,
                pools,
                tag_length=tag_length,
                timeout=timeout,
                block_interval=block_interval,
                max_block_txs=max_block_txs,
                key_hook=key_hook,
                fault=faults.get(m, Fault.HONEST),
            )
            for m in self.members
        }
        self.commits: list[Committed] = []
        self.rounds: dict[int, RoundMetrics] = {}
        self.forged_injected = 0

    # -- helpers --------------------------------------------------------------

    def honest_ids(self) -> list[str]:
        return [m for m, node in self.nodes.items() if node.honest]

    def alive_ids(self) -> list[str]:
        return [m for m, node in self.nodes.items() if not node.crashed]

    def crash(self, node_id: str) -> None:
        self.nodes[node_id].crash()

    def _round(self, r: int) -> RoundMetrics:
        rm = self.rounds.get(r)
        if rm is None:
            rm = self.rounds[r] = RoundMetrics(r, leader_for(self.members, r))
        return rm

    @property
    def forged_accepted(self) -> int:
        return sum(node.forged_accepted for node in self.nodes.values())

    # -- event plumbing -------------------------------------------------------

    def _apply(self, actions: Iterable, now: float) -> None:
        for action in actions:
            if isinstance(action, ConsensusMessage):
                if action.phase is Phase.PROPOSE:
                    rm = self._round(action.round)
                    if rm.proposed_at is None:
                        rm.proposed_at = now
                for recipient in sorted(action.tags):
                    delay = self.latency(action.sender, recipient)
                    if delay is None:
                        continue  # no control-channel path right now
                    self.queue.schedule(now + delay, EventKind.MESSAGE_DELIVERY, (recipient, action))
            elif isinstance(action, TimerRequest):
                self.queue.schedule(action.deadline, action.kind, (action.node, action.round))
            elif isinstance(action, Committed):
                self.commits.append(action)
                rm = self._round(action.round)
                if rm.committed_at is None:
                    rm.committed_at = now
                if self.on_commit is not None:
                    self.on_commit(action)

    def submit(self, tx: Transaction, now: float, authenticate: bool = False, origin: str | None = None) -> None:
        """Hand ``tx`` to every member; with ``authenticate`` each checks its own tag first."""
        for m in self.members:
            self._apply(self.nodes[m].submit(tx, now, authenticate, origin), now)

    def start(self, now: float) -> None:
        """Let the current leaders act on whatever is already in their mempools."""
        for m in self.members:
            self._apply(self.nodes[m]._kick(now), now)

    def inject(self, msg: ConsensusMessage, now: float) -> None:
        self.forged_injected += 1
        self._apply([msg], now)

    def dispatch(self, event: SimEvent) -> bool:
        """Handle a consensus event; returns False for events owned by someone else."""
        now = event.time
        if event.kind is EventKind.MESSAGE_DELIVERY:
            recipient, msg = event.payload
            node = self.nodes.get(recipient)
            if node is None:
                return True
            self._apply(node.handle(msg, now), now)
        elif event.kind is EventKind.CONSENSUS_TIMER:
            node_id, r = event.payload
            node = self.nodes[node_id]
            if node.round == r and node.state(r).decided is None and not node.crashed:
                self._round(r).timed_out = True
            self._apply(node.on_timer(r, now), now)
        elif event.kind is EventKind.BLOCK_TIMER:
            node_id, r = event.payload
            self._apply(self.nodes[node_id].on_block_timer(r, now), now)
        else:
            return False
        return True

    def run(self, until: float | None = None, max_events: int = 1_000_000) -> None:
        for _ in range(max_events):
            if not self.queue:
                return
            if until is not None and self.queue.peek_time() > until:
                return
            self.dispatch(self.queue.pop())
        raise InvariantViolation("consensus did not quiesce")

    # -- checks ---------------------------------------------------------------

    def finalize_decision(self, round_: int) -> ConsensusOutcome:
        digests = {self.nodes[m].decisions.get(round_) for m in self.honest_ids()} - {None}
        if len(digests) > 1:
            raise InvariantViolation(f"honest nodes decided different blocks in round {round_}")
        digest = digests.pop() if digests else None
        committed, stale = [], []
        for m in self.members:
            chain = self.nodes[m].ledger.chain
            if digest is not None and any(b.hash == digest for b in chain):
                committed.append(m)
            else:
                stale.append(m)
        rm = self.rounds.get(round_)
        return ConsensusOutcome(round_, digest, committed, stale, rm.latency if rm else None)

    def check_safety(self) -> None:
        """Raise if two honest replicas disagree on any block they both hold."""
        honest = [self.nodes[m].ledger for m in self.honest_ids()]
        for r in {r for m in self.honest_ids() for r in self.nodes[m].decisions}:
            self.finalize_decision(r)
        for a in honest:
            for b in honest:
                for x, y in zip(a.chain, b.chain):
                    if x.hash != y.hash:
                        raise InvariantViolation(f"ledgers of {a.owner} and {b.owner} diverge at height {x.height}")

    def honest_tips_agree(self) -> bool:
        """True when all honest, non-crashed replicas hold byte-identical chains."""
        digests = {self.nodes[m].ledger.replica_digest() for m in self.honest_ids()}
        return len(digests) <= 1


def finalize_decision(cluster: ConsensusCluster, round_: int) -> ConsensusOutcome:
    return cluster.finalize_decision(round_)
