"""Discrete-event driver: traffic generation, event dispatch and the metrics report."""

from __future__ import annotations

import csv
import io
from collections import Counter

from . import adversary
from .config import Scenario
from .consensus import ConsensusMessage
from .engine import EventKind, SimEvent
from .errors import InvariantViolation
from .ledger import H
from .metrics import summarize
from .network import BLOCK_REASONS, LightpathRequest, NetworkState, ProvisionResult

TRACE_HEADER = ("time", "kind", "detail")


class Simulation:
    def __init__(self, scenario: Scenario, seed: int, *, trace: bool = False):
        self.scenario = scenario
        self.seed = seed
        self.state = NetworkState(scenario, seed)
        self.queue = self.state.queue
        self.trace_rows: list[tuple[str, str, str]] | None = [] if trace else None
        self.results: list[tuple[LightpathRequest, ProvisionResult]] = []
        self.events = Counter()
        self._next_request = 0
        self.finished_at = 0.0
        self._started = False

    # -- traffic --------------------------------------------------------------

    def _schedule_arrival(self, now: float) -> None:
        lam = self.scenario.traffic.lam
        if lam <= 0:
            return
        t = now + float(self.state.rng["traffic"].exponential(1.0 / lam))
        if t <= self.scenario.horizon:
            self.queue.schedule(t, EventKind.ARRIVAL)

    def _new_request(self, now: float) -> LightpathRequest:
        traffic = self.scenario.traffic
        rng = self.state.rng["traffic"]
        nodes = sorted(self.scenario.topology.nodes)
        i, j = rng.choice(len(nodes), size=2, replace=False)
        holding = float(rng.exponential(1.0 / traffic.mu))
        secure = bool(rng.random() < traffic.secure_fraction)
        rid = self._next_request
        self._next_request += 1
        return LightpathRequest(
            rid,
            nodes[int(i)],
            nodes[int(j)],
            traffic.required_key_bits if secure else 0,
            max(holding, 1e-9),
            now,
            secure,
        )

    # -- dispatch -------------------------------------------------------------

    def _trace(self, event: SimEvent, detail: str) -> None:
        if self.trace_rows is not None:
            self.trace_rows.append((f"{event.time:.9f}", event.kind.value, detail))

    def _dispatch(self, event: SimEvent) -> None:
        state = self.state
        kind = event.kind
        self.events[kind.value] += 1
        if kind is EventKind.MESSAGE_DELIVERY:
            recipient, msg = event.payload
            self._trace(event, _message_detail(recipient, msg))
            state.cluster.dispatch(event)
            return
        if kind in (EventKind.CONSENSUS_TIMER, EventKind.BLOCK_TIMER):
            node, round_ = event.payload
            self._trace(event, f"node={node} round={round_}")
            state.cluster.dispatch(event)
            return
        if kind is EventKind.ARRIVAL:
            request = self._new_request(event.time)
            result = state.provision(request)
            self.results.append((request, result))
            self._trace(event, _request_detail(request, result))
            self._schedule_arrival(event.time)
        elif kind is EventKind.DEPARTURE:
            record = state.release(event.payload)
            self._trace(event, f"lightpath={record.lightpath_id} tx={record.tx_id} queued={int(record.queued)}")
        elif kind is EventKind.QKD_SESSION_DUE:
            link_id, what = event.payload
            outcome = state.on_qkd_event(link_id, what)
            if outcome is None:
                self._trace(event, f"link={link_id} phase={what}")
            else:
                self._trace(
                    event,
                    f"link={link_id} phase={what} status={outcome.status} reason={outcome.reason or '-'} "
                    f"qber={outcome.qber_estimate:.6f} bits={outcome.final_length}",
                )
        elif kind is EventKind.ATTACK_TRIGGER:
            self._trace(event, adversary.trigger(event.payload, state))
        else:
            raise InvariantViolation(f"unhandled event kind {kind}")
        state.check_conservation()

    def start(self) -> None:
        """Schedule attacks and the first arrival, and start QKD on every hop below watermark."""
        if self._started:
            return
        self._started = True
        for spec in self.scenario.attacks:
            self.queue.schedule(spec.time, EventKind.ATTACK_TRIGGER, spec)
        self._schedule_arrival(0.0)
        self.state.replenish()

    def advance(self, until: float) -> None:
        """Process every event with time <= ``until``."""
        self.start()
        while self.queue and self.queue.peek_time() <= until:
            event = self.queue.pop()
            self._dispatch(event)
            self.state.replenish()
            self.finished_at = event.time

    def run(self) -> dict:
        self.advance(self.scenario.end_time)
        self.state.check_conservation()
        self.state.cluster.check_safety()
        return self.report()

    # -- outputs --------------------------------------------------------------

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        writer.writerows(self.trace_rows or [])
        return buf.getvalue()

    def report(self) -> dict:
        state = self.state
        scenario = self.scenario
        cluster = state.cluster

        arrived = len(self.results)
        blocked = Counter(r.reason for _, r in self.results if not r.established)
        secure = [(q, r) for q, r in self.results if q.security_required]
        secure_blocked = Counter(r.reason for _, r in secure if not r.established)
        n_blocked = sum(blocked.values())

        def ratio(a: int, b: int) -> float:
            return a / b if b else 0.0

        elapsed = max(self.finished_at, 0.0)
        links = {}
        for lid, ql in state.qkd_links.items():
            links[lid] = {
                "sessions": ql.sessions,
                "aborted": ql.aborted,
                "eavesdrop_aborts": ql.eavesdrop_aborts,
                "interrupted": ql.interrupted,
                "mean_qber": ql.qber_sum / ql.sessions if ql.sessions else 0.0,
                "max_qber": ql.qber_max,
                "key_bits": ql.key_bits,
                "key_rate_bps": ratio(ql.key_bits, elapsed) if elapsed > 0 else 0.0,
                "pool_remaining": state.link_pools.get(ql.link.a, ql.link.b).remaining,
                "eavesdrop_fraction": ql.channel.eavesdrop_fraction,
            }

        rounds = []
        for r in sorted(cluster.rounds):
            rm = cluster.rounds[r]
            totals = Counter()
            for node in cluster.nodes.values():
                totals.update(node.round_stats.get(r, {}))
            rounds.append(
                {
                    "round": r,
                    "leader": rm.leader,
                    "proposed_at": rm.proposed_at,
                    "committed_at": rm.committed_at,
                    "latency": rm.latency,
                    "timed_out": rm.timed_out,
                    "messages_sent": totals["sent"],
                    "messages_dropped": totals["dropped"],
                    "forged_rejected": totals["forged_rejected"],
                }
            )
        node_stats = Counter()
        for node in cluster.nodes.values():
            node_stats.update(node.stats)

        ledgers = {m: cluster.nodes[m].ledger for m in state.validators}
        honest = state.honest_ledger_nodes()
        committed_ids = set()
        for m in honest:
            committed_ids.update(ledgers[m].transaction_ids())
        all_ids = [tid for m in ledgers for tid in ledgers[m].transaction_ids()]

        established = list(state.lightpaths.values())
        departed = [lp for lp in established if lp.released_at is not None]

        def recorded_once(tx_ids) -> bool:
            return all(ledgers[m].transaction_ids().count(t) == 1 for m in honest for t in tx_ids)

        sybil_accepted = sum(1 for tid in all_ids if tid in state.sybil_tx_ids)
        sybil_accepted += sum(
            1 for node in cluster.nodes.values() for tid in node.mempool if tid in state.sybil_tx_ids
        )
        pending = {tid for node in cluster.nodes.values() if node.honest for tid in node.mempool}

        latencies = [rm.latency for rm in cluster.rounds.values() if rm.latency is not None]
        tx_latency = []
        for lp in established:
            if lp.committed_at is not None:
                tx_latency.append(lp.committed_at - lp.submitted_at)

        report = {
            "scenario": {
                "seed": self.seed,
                "duration": scenario.horizon,
                "end_time": scenario.end_time,
                "last_event_time": self.finished_at,
                "validators": list(state.validators),
                "events": dict(self.events),
            },
            "requests": {
                "arrived": arrived,
                "established": arrived - n_blocked,
                "blocked": n_blocked,
                "secure_arrived": len(secure),
                "secure_blocked": sum(secure_blocked.values()),
            },
            "blocking": {
                "probability": ratio(n_blocked, arrived),
                "by_reason": {r: blocked.get(r, 0) for r in BLOCK_REASONS},
                "probability_by_reason": {r: ratio(blocked.get(r, 0), arrived) for r in BLOCK_REASONS},
                "secure_by_reason": {r: secure_blocked.get(r, 0) for r in BLOCK_REASONS},
                "secure_probability": ratio(sum(secure_blocked.values()), len(secure)),
            },
            "qkd": {
                "links": links,
                "total_key_bits": sum(v["key_bits"] for v in links.values()),
                "sessions": sum(v["sessions"] for v in links.values()),
            },
            "keys": {
                "e2e_refills": state.counters["e2e_refills"],
                "e2e_refill_bits": state.counters["e2e_refill_bits"],
                "e2e_starved": state.counters["e2e_starved"],
            },
            "consensus": {
                "rounds": rounds,
                "round_count": len(rounds),
                "committed_rounds": sum(1 for rm in cluster.rounds.values() if rm.committed_at is not None),
                "timed_out_rounds": sum(1 for rm in cluster.rounds.values() if rm.timed_out),
                "commit_latency": summarize(latencies),
                "transaction_latency": summarize(tx_latency),
                "messages_sent": node_stats["sent"],
                "messages_dropped": node_stats["dropped"],
                "forged_rejected": node_stats["forged_rejected"],
                "forged_accepted": cluster.forged_accepted,
                "transactions_rejected": node_stats["tx_rejected"],
                "invalid_proposals": node_stats["invalid_proposals"],
                "starved_sends": node_stats["starved"],
            },
            "ledger": {
                "heights": {m: ledgers[m].height for m in ledgers},
                "tip_hashes": {m: ledgers[m].tip_hash().hex() for m in ledgers},
                "audit": {m: state.tampered[m][1] if m in state.tampered else None for m in ledgers},
                "divergence": _diverged(ledgers.values()),
                "honest_divergence": _diverged(ledgers[m] for m in honest),
                "honest_nodes": honest,
                "committed_transactions": len(committed_ids),
                "pending_transactions": len(pending),
            },
            "lightpaths": {
                "established": len(established),
                "committed": sum(1 for lp in established if lp.committed_at is not None),
                "released": len(departed),
                "release_committed": sum(1 for lp in departed if lp.release_tx in state.first_commit),
                "active_at_end": len(established) - len(departed),
                "deferred_releases": len(state.deferred_releases),
                "establish_recorded_once": recorded_once([lp.establish_tx for lp in established]),
                "release_recorded_once": recorded_once([lp.release_tx for lp in departed]),
            },
            "attacks": {
                "eavesdrop_attacks": state.counters["eavesdrop_attacks"],
                "eavesdrop_aborts": sum(v["eavesdrop_aborts"] for v in links.values()),
                "sybil_nodes": len(state.sybils),
                "sybil_transactions": state.counters["sybil_transactions"],
                "sybil_transactions_accepted": sybil_accepted,
                "sybil_messages": state.counters["sybil_messages"],
                "forged_accepted": cluster.forged_accepted,
                "tamper_events": state.counters["tamper_events"],
                "tamper_detected": state.counters["tamper_detected"],
                "node_failures": state.counters["node_failures"],
            },
            "invariants": {
                "resource_conservation": True,  # checked at every event boundary; a failure halts the run
                "honest_ledgers_equal": not _diverged([ledgers[m] for m in honest], prefix_ok=False),
            },
        }
        return report


def _diverged(ledgers, prefix_ok: bool = True) -> bool:
    """True when two replicas disagree at a height both hold (or differ at all)."""
    chains = [[H(b.to_bytes()) for b in ledger.chain] for ledger in ledgers]
    for i, a in enumerate(chains):
        for b in chains[i + 1 :]:
            if not prefix_ok and len(a) != len(b):
                return True
            if any(x != y for x, y in zip(a, b)):
                return True
    return False


def _message_detail(recipient: str, msg: ConsensusMessage) -> str:
    return f"to={recipient} from={msg.sender} phase={msg.phase.name} round={msg.round} digest={msg.block_digest.hex()[:16]}"


def _request_detail(req: LightpathRequest, res: ProvisionResult) -> str:
    text = (
        f"request={req.id} src={req.source} dst={req.destination} secure={int(req.security_required)} "
        f"holding={req.holding_time:.6f} status={res.status}"
    )
    if res.established:
        return text + f" path={'>'.join(res.path)} TDCh={res.wavelengths['TDCh']} tx={res.ledger_tx}"
    return text + f" reason={res.reason}"


def run_simulation(scenario: Scenario, seed: int | None = None, *, trace: bool = False) -> dict:
    seed = scenario.sim.seed if seed is None else seed
    return Simulation(scenario, seed, trace=trace).run()
