"""Built-in verification suites, one per acceptance property.

Each check measures something from the real code paths and compares it with
an analytically derived target. ``run_suite`` prints one PASS/FAIL line per
check so the same code serves the CLI and the acceptance tests.
"""

from __future__ import annotations

import copy
import json
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import binom

from .bits import random_bits
from .config import load_scenario
from .consensus import ConsensusCluster, Fault
from .ledger import Ledger, Verdict, append_block, assemble_block, audit_chain, make_transaction, tamperable_bits
from .qcrypto import KeyPools, Tag, toeplitz_tag, verify_tag
from .qkd import ChannelModel, SessionParams, encode, measure, run_session, sift, transmit
from .simulation import Simulation

LOADS_ERLANG = (1, 5, 10, 20)


@dataclass(frozen=True)
class Check:
    criterion: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.criterion} ({self.name}): {self.detail}"


def _sifted_keys(n: int, channel: ChannelModel, rng: np.random.Generator):
    a_bits = random_bits(rng, n)
    a_bases = random_bits(rng, n)
    received = transmit(encode(a_bits, a_bases), channel, rng)
    b_bases = random_bits(rng, n)
    det = measure(received, b_bases, rng)
    kept = sift(a_bases, b_bases, det.detected)
    return a_bits[kept], det.bits[kept]


# -- 1 -----------------------------------------------------------------------


def check_bb84_baseline(n: int = 100_000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    a, b = _sifted_keys(n, ChannelModel(), rng)
    full_qber = float(np.mean(a != b)) if a.size else 1.0
    fraction = a.size / n
    t0 = time.perf_counter()
    outcome = run_session(SessionParams(n), ChannelModel(), np.random.default_rng(seed + 1))
    elapsed = time.perf_counter() - t0
    ok = full_qber == 0.0 and outcome.qber_estimate == 0.0 and abs(fraction - 0.5) <= 0.01 and elapsed < 5.0
    return Check(
        1,
        "BB84 baseline",
        ok and outcome.ok,
        f"QBER={full_qber:.6f} (session estimate {outcome.qber_estimate:.6f}), sifted fraction={fraction:.4f}, "
        f"session time={elapsed:.3f}s, key bits={outcome.final_length}",
    )


# -- 2 -----------------------------------------------------------------------


def abort_tail_bound(sample: int = 100, threshold: float = 0.11, qber: float = 0.25) -> float:
    """Probability that a full intercept-resend attack passes the QBER test."""
    return float(binom.cdf(math.floor(threshold * sample), sample, qber))


def check_eavesdropper(n: int = 100_000, sessions: int = 1000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    measured = {}
    for p in (1.0, 0.5, 0.2):
        a, b = _sifted_keys(n, ChannelModel(eavesdrop_fraction=p), rng)
        measured[p] = float(np.mean(a != b))
    qber_ok = all(abs(q - p / 4) <= 0.02 for p, q in measured.items())

    # 2200 qubits sift to about 1100 bits, so the 10% sample holds at least 100 bits.
    params = SessionParams(2200, sample_fraction=0.1, qber_threshold=0.11)
    aborts = 0
    min_sample = None
    srng = np.random.default_rng(seed + 1)
    for _ in range(sessions):
        out = run_session(params, ChannelModel(eavesdrop_fraction=1.0), srng)
        k = math.ceil(params.sample_fraction * out.sifted_length)
        min_sample = k if min_sample is None else min(min_sample, k)
        aborts += not out.ok
    rate = aborts / sessions
    bound = abort_tail_bound()
    ok = qber_ok and min_sample >= 100 and rate >= 0.999 and bound < 1e-3
    qtext = ", ".join(f"p={p}: {q:.4f} (target {p / 4:.3f})" for p, q in measured.items())
    return Check(
        2,
        "eavesdropper signature",
        ok,
        f"QBER {qtext}; abort rate {rate:.4f} over {sessions} sessions (min sample {min_sample}); "
        f"P[Bin(100,0.25)<=11]={bound:.3e}",
    )


# -- 3 -----------------------------------------------------------------------


def check_toeplitz(trials: int = 100_000, injections: int = 100_000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    t, m = 16, 64
    msg1 = random_bits(rng, m)
    msg2 = msg1.copy()
    msg2[[3, 17, 40]] ^= 1
    collisions = 0
    for _ in range(trials):
        s = random_bits(rng, m + t - 1)
        collisions += bool(np.array_equal(toeplitz_tag(s, msg1, t), toeplitz_tag(s, msg2, t)))
    p = 2.0**-t
    mean = trials * p
    sigma = math.sqrt(trials * p * (1 - p))
    collision_ok = abs(collisions - mean) <= 3 * sigma

    pools = KeyPools()
    pool = pools.ensure("alice", "bob")
    pool.deposit(random_bits(rng, 1_000_000))
    pool.draw(1_000_000)  # everything "used", so forged offsets hit real key material
    tag_len = 32
    span = (256 + tag_len - 1) + tag_len
    accepted = 0
    for _ in range(injections):
        message = random_bits(rng, 256)
        tag = Tag(int(rng.integers(0, pool.consumed - span)), tag_len, int(rng.integers(0, 1 << tag_len)))
        accepted += verify_tag(message, tag, "bob", "alice", pools)
    ok = collision_ok and accepted == 0
    return Check(
        3,
        "Toeplitz two-universality",
        ok,
        f"collisions {collisions}/{trials} (expected {mean:.3f} +/- 3*{sigma:.3f}); "
        f"forged 32-bit tags accepted {accepted}/{injections}",
    )


# -- 4 -----------------------------------------------------------------------


def build_chain(n_blocks: int = 100, seed: int = 0) -> Ledger:
    nodes = ["n0", "n1", "n2", "n3"]
    rng = np.random.default_rng(seed)
    pools = KeyPools()
    for i, a in enumerate(nodes):
        for b in nodes[i + 1 :]:
            pools.ensure(a, b).deposit(random_bits(rng, 400_000))
    ledger = Ledger("n0")
    for h in range(1, n_blocks):
        txs = [
            make_transaction(bytes(rng.integers(0, 256, 8, dtype=np.uint8)), nodes[(h + k) % 4], nodes, pools,
                             h * 1000 + k, rng=rng, tx_id=f"tx-{h}-{k}")
            for k in range(1 + h % 3)
        ]
        append_block(ledger, assemble_block(txs, ledger.tip, h * 1000, {tx.id: Verdict.ACCEPT for tx in txs}))
    return ledger


def check_tamper(flips: int = 1000, seed: int = 0) -> Check:
    from .ledger import tamper_ledger

    ledger = build_chain(100, seed)
    honest_digest = ledger.replica_digest()
    rng = np.random.default_rng(seed + 1)
    localized = detected = differ = 0
    for _ in range(flips):
        h = int(rng.integers(0, len(ledger.chain)))
        pos = int(rng.integers(0, tamperable_bits(ledger.chain[h])))
        original = ledger.chain[h]
        tamper_ledger(ledger, h, pos)
        found = audit_chain(ledger)
        detected += found is not None
        localized += found in (h, h + 1)
        differ += ledger.replica_digest() != honest_digest
        ledger.chain[h] = original
    ok = localized == detected == differ == flips and audit_chain(ledger) is None
    return Check(
        4,
        "tamper detection",
        ok,
        f"{len(ledger.chain)}-block chain, {flips} flips: detected {detected}, localized at h or h+1 {localized}, "
        f"replica digest differs {differ}",
    )


# -- 5 -----------------------------------------------------------------------


def _consensus_run(seed: int, faults: dict, n_txs: int = 6):
    nodes = ["n0", "n1", "n2", "n3"]
    rng = np.random.default_rng(seed)
    pools = KeyPools()
    for i, a in enumerate(nodes):
        for b in nodes[i + 1 :]:
            pools.ensure(a, b).deposit(random_bits(rng, 300_000))
    lat_rng = np.random.default_rng(seed + 7)
    cluster = ConsensusCluster(
        nodes, pools, faults=faults, timeout=0.5, latency=lambda a, b: float(lat_rng.uniform(0.001, 0.003))
    )
    senders = [m for m in nodes if faults.get(m, Fault.HONEST) is Fault.HONEST]
    for k in range(n_txs):
        t = 0.3 * k
        cluster.run(until=t)
        sender = senders[k % len(senders)]
        tx = make_transaction(bytes([k]), sender, nodes, pools, int(t * 1e6), rng=rng, tx_id=f"s{seed}-tx{k}")
        cluster.submit(tx, t)
    cluster.run(until=60.0)
    return cluster


def check_consensus(runs: int = 100, f2_runs: int = 20, seed: int = 0) -> Check:
    nodes = ["n0", "n1", "n2", "n3"]
    rng = np.random.default_rng(seed)
    agree = live = 0
    slow = 0
    honest_rounds = 0
    bound = 3 * 0.003 + 1e-9
    for i in range(runs):
        victim = nodes[int(rng.integers(0, 4))]
        fault = Fault.CRASHED if i % 2 == 0 else Fault.EQUIVOCATE
        cluster = _consensus_run(seed * 1000 + i, {victim: fault})
        cluster.check_safety()
        agree += cluster.honest_tips_agree()
        honest = cluster.honest_ids()
        live += all(len(cluster.nodes[m].ledger.transaction_ids()) == 6 for m in honest)
        for r, rm in cluster.rounds.items():
            if rm.leader != victim and rm.committed_at is not None:
                honest_rounds += 1
                slow += rm.latency > bound
    zero_commit = no_div = 0
    for i in range(f2_runs):
        pair = list(rng.choice(nodes, size=2, replace=False))
        faults = {pair[0]: Fault.CRASHED, pair[1]: Fault.CRASHED if i % 2 == 0 else Fault.EQUIVOCATE}
        cluster = _consensus_run(seed * 1000 + runs + i, faults)
        cluster.check_safety()
        zero_commit += not cluster.commits
        no_div += cluster.honest_tips_agree()
    ok = agree == runs and slow == 0 and honest_rounds > 0 and zero_commit == f2_runs and no_div == f2_runs
    return Check(
        5,
        "BFT consensus",
        ok,
        f"f=1: agreement {agree}/{runs}, all txs committed {live}/{runs}, honest-leader rounds {honest_rounds} "
        f"with {slow} slower than 3 message delays; f=2: zero-commit runs {zero_commit}/{f2_runs}, "
        f"no divergence {no_div}/{f2_runs}",
    )


# -- 6 -----------------------------------------------------------------------


def load_document(config_path) -> dict:
    return json.loads(Path(config_path).read_text())


def check_sybil(config_path, seed: int = 1, count: int = 10) -> Check:
    doc = copy.deepcopy(load_document(config_path))
    doc["attacks"] = [{"kind": "Sybil", "time": 0.5, "count": count, "interval": 1.0}]
    report = Simulation(load_scenario(doc), seed).run()
    att = report["attacks"]
    ok = (
        att["sybil_nodes"] == count
        and att["sybil_transactions"] > 0
        and att["sybil_messages"] > 0
        and att["sybil_transactions_accepted"] == 0
        and att["forged_accepted"] == 0
        and not report["ledger"]["honest_divergence"]
    )
    return Check(
        6,
        "sybil rejection",
        ok,
        f"{count} sybils sent {att['sybil_transactions']} transactions and {att['sybil_messages']} consensus "
        f"messages; accepted transactions {att['sybil_transactions_accepted']}, forged accepted "
        f"{att['forged_accepted']}; honest lightpaths committed {report['lightpaths']['committed']}",
    )


# -- 7 -----------------------------------------------------------------------


def load_sweep(config_path, seeds=range(1, 11), loads=LOADS_ERLANG) -> dict:
    base = load_document(config_path)
    out = {}
    for load in loads:
        doc = copy.deepcopy(base)
        doc["attacks"] = []
        doc["traffic"]["lambda"] = load * doc["traffic"].get("mu", 1.0)
        scenario = load_scenario(doc)
        out[load] = [Simulation(scenario, s).run() for s in seeds]
    return out


def check_workflow(config_path, seeds=range(1, 11)) -> Check:
    t0 = time.perf_counter()
    sweep = load_sweep(config_path, seeds)
    means = {load: float(np.mean([r["blocking"]["probability"] for r in reports])) for load, reports in sweep.items()}
    order = [means[load] for load in LOADS_ERLANG]
    monotone = all(a <= b for a, b in zip(order, order[1:]))
    reports = [r for rs in sweep.values() for r in rs]
    recorded = all(r["lightpaths"]["establish_recorded_once"] for r in reports)
    diverged = any(r["ledger"]["honest_divergence"] for r in reports)

    doc = copy.deepcopy(load_document(config_path))
    doc["attacks"] = []
    doc["traffic"]["lambda"] = 10 * doc["traffic"].get("mu", 1.0)
    baseline = Simulation(load_scenario(doc), 1).run()
    doc["qkd"]["qubit_rate"] = 0
    throttled = Simulation(load_scenario(doc), 1).run()
    tb = throttled["blocking"]
    secure_all_starved = (
        throttled["requests"]["secure_arrived"] > 0
        and tb["secure_by_reason"]["KeyStarved"] == throttled["requests"]["secure_arrived"]
    )
    elapsed = time.perf_counter() - t0
    ok = monotone and recorded and not diverged and secure_all_starved and elapsed < 300
    mtext = ", ".join(f"{load}E: {means[load]:.4f}" for load in LOADS_ERLANG)
    return Check(
        7,
        "end-to-end workflow",
        ok,
        f"mean blocking {mtext}; establish recorded once in every run: {recorded}; "
        f"secure blocking reasons baseline {baseline['blocking']['secure_by_reason']} -> throttled "
        f"{tb['secure_by_reason']}; runtime {elapsed:.1f}s",
    )


# -- 8 -----------------------------------------------------------------------


def determinism_document(config_path) -> dict:
    doc = copy.deepcopy(load_document(config_path))
    links = doc["topology"]["links"]
    first = links[0].get("id", "-".join(links[0]["endpoints"]))
    doc["attacks"] = [
        {"kind": "Eavesdrop", "time": 5.0, "link": first, "fraction": 1.0},
        {"kind": "Sybil", "time": 2.0, "count": 3, "interval": 2.0},
        {"kind": "NodeFailure", "time": 20.0, "node": doc["topology"]["nodes"][-1]["id"]},
    ]
    return doc


def check_determinism(config_path, seed: int = 7) -> Check:
    from .cli import run_seed

    scenario = load_scenario(determinism_document(config_path))
    with tempfile.TemporaryDirectory() as tmp:
        outs = [run_seed(scenario, seed, Path(tmp) / f"run{i}", True) for i in range(2)]
        same = {
            name: getattr(outs[0], name).read_bytes() == getattr(outs[1], name).read_bytes()
            for name in ("metrics", "ledger", "trace")
        }
        sizes = {name: len(getattr(outs[0], name).read_bytes()) for name in same}
    ok = all(same.values())
    return Check(8, "determinism", ok, f"byte-identical {same}; sizes {sizes}")


SUITES: dict[str, Callable] = {
    "bb84": lambda cfg: check_bb84_baseline(),
    "eavesdrop": lambda cfg: check_eavesdropper(),
    "toeplitz": lambda cfg: check_toeplitz(),
    "tamper": lambda cfg: check_tamper(),
    "consensus": lambda cfg: check_consensus(),
    "sybil": lambda cfg: check_sybil(cfg),
    "workflow": lambda cfg: check_workflow(cfg),
    "determinism": lambda cfg: check_determinism(cfg),
}


def run_suite(name: str, config_path, quiet: bool = False) -> bool:
    from .errors import ConfigError

    names = list(SUITES) if name == "all" else [name]
    for n in names:
        if n not in SUITES:
            raise ConfigError("--verify", f"unknown suite {n!r}; choose from all, {', '.join(SUITES)}")
    ok = True
    for n in names:
        check = SUITES[n](config_path)
        ok &= check.passed
        if not quiet:
            print(check.line(), flush=True)
    return ok
