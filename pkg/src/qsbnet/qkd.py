"""BB84 key distribution over a simulated lossy, noisy, tappable channel.

Every random choice comes from an explicit ``numpy.random.Generator`` so a
session is a pure function of its parameters and seed. Qubit batches are
stored column-wise (one array per field) for speed; indexing a
:class:`Qubits` batch yields a :class:`Qubit`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .bits import as_bits, random_bits
from .errors import (
    EavesdropperSuspected,
    InsufficientSample,
    InvalidInput,
    KeyExhausted,
    QkdAbort,
    ReconciliationImpossible,
)
from .qcrypto import SecretKeyPool, toeplitz_tag


class Basis(IntEnum):
    RECTILINEAR = 0  # 0 / 90 degrees
    DIAGONAL = 1  # +45 / -45 degrees


@dataclass(frozen=True)
class Qubit:
    bit: int
    basis: Basis
    lost: bool = False


@dataclass
class Qubits:
    bits: np.ndarray
    bases: np.ndarray
    lost: np.ndarray

    def __len__(self) -> int:
        return int(self.bits.size)

    def __getitem__(self, i: int) -> Qubit:
        return Qubit(int(self.bits[i]), Basis(int(self.bases[i])), bool(self.lost[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def copy(self) -> "Qubits":
        return Qubits(self.bits.copy(), self.bases.copy(), self.lost.copy())


@dataclass(frozen=True)
class ChannelModel:
    loss_probability: float = 0.0
    flip_probability: float = 0.0
    eavesdrop_fraction: float = 0.0

    def __post_init__(self):
        for name in ("loss_probability", "flip_probability", "eavesdrop_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidInput(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class SessionParams:
    n_qubits: int
    sample_fraction: float = 0.1
    qber_threshold: float = 0.11
    security_parameter: int = 64
    ec_efficiency: float = 1.2

    def __post_init__(self):
        if self.n_qubits <= 0:
            raise InvalidInput("n_qubits must be positive")
        if not 0.0 < self.sample_fraction < 1.0:
            raise InvalidInput("sample_fraction must lie in (0, 1)")
        if not 0.0 <= self.qber_threshold <= 1.0:
            raise InvalidInput("qber_threshold must lie in [0, 1]")
        if self.security_parameter < 0:
            raise InvalidInput("security_parameter must be non-negative")
        if self.ec_efficiency < 1.0:
            raise InvalidInput("ec_efficiency must be >= 1")


@dataclass
class Detections:
    bits: np.ndarray
    detected: np.ndarray

    def __len__(self) -> int:
        return int(self.bits.size)


@dataclass
class Reconciliation:
    key: np.ndarray
    leaked_bits: int


@dataclass
class SessionOutcome:
    status: str  # "key" or "aborted"
    qber_estimate: float
    sifted_length: int
    final_length: int
    key: np.ndarray | None = None
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "key"


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def _bases_array(bases) -> np.ndarray:
    arr = np.asarray([int(b) for b in bases] if not isinstance(bases, np.ndarray) else bases, dtype=np.uint8)
    if arr.size and arr.max() > 1:
        raise InvalidInput("basis values must be 0 (rectilinear) or 1 (diagonal)")
    return arr.reshape(-1)


def encode(bits, bases) -> Qubits:
    bits = as_bits(bits)
    bases = _bases_array(bases)
    if bits.size != bases.size:
        raise InvalidInput(f"{bits.size} bits but {bases.size} bases")
    return Qubits(bits.copy(), bases.copy(), np.zeros(bits.size, dtype=bool))


def transmit(qubits: Qubits, channel: ChannelModel, rng: np.random.Generator) -> Qubits:
    """Send qubits through the channel: intercept-resend, then loss, then noise."""
    n = len(qubits)
    out = qubits.copy()
    if n == 0:
        return out
    # Draws are skipped entirely for zero-probability effects so an ideal
    # channel neither alters qubits nor consumes randomness.
    if channel.eavesdrop_fraction > 0.0:
        tapped = rng.random(n) < channel.eavesdrop_fraction
        eve_bases = random_bits(rng, n)
        guesses = random_bits(rng, n)
        eve_bits = np.where(eve_bases == out.bases, out.bits, guesses)
        out.bits = np.where(tapped, eve_bits, out.bits).astype(np.uint8)
        out.bases = np.where(tapped, eve_bases, out.bases).astype(np.uint8)
    if channel.loss_probability > 0.0:
        out.lost = out.lost | (rng.random(n) < channel.loss_probability)
    if channel.flip_probability > 0.0:
        flips = rng.random(n) < channel.flip_probability
        out.bits = np.bitwise_xor(out.bits, flips.astype(np.uint8))
    return out


def measure(qubits: Qubits, bases, rng: np.random.Generator) -> Detections:
    bases = _bases_array(bases)
    if bases.size != len(qubits):
        raise InvalidInput(f"{len(qubits)} qubits but {bases.size} measurement bases")
    guesses = random_bits(rng, bases.size)
    bits = np.where(bases == qubits.bases, qubits.bits, guesses).astype(np.uint8)
    detected = ~qubits.lost
    bits = np.where(detected, bits, 0).astype(np.uint8)
    return Detections(bits, detected.copy())


def sift(alice_bases, bob_bases, detected) -> np.ndarray:
    a = _bases_array(alice_bases)
    b = _bases_array(bob_bases)
    d = np.asarray(detected, dtype=bool).reshape(-1)
    if not (a.size == b.size == d.size):
        raise InvalidInput("sift inputs must have equal lengths")
    return np.flatnonzero((a == b) & d)


def estimate_qber(alice_key, bob_key, sample_indices) -> float:
    a = as_bits(alice_key)
    b = as_bits(bob_key)
    if a.size != b.size:
        raise InvalidInput("keys must have equal length")
    idx = np.asarray(sample_indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise InsufficientSample("no positions sampled")
    if idx.min() < 0 or idx.max() >= a.size:
        raise InvalidInput("sample index out of range")
    return float(np.count_nonzero(a[idx] != b[idx])) / idx.size


def leaked_bits_for(n: int, qber: float, ec_efficiency: float) -> int:
    return math.ceil(ec_efficiency * n * binary_entropy(qber))


def correct_errors(alice_key, bob_key, qber: float, ec_efficiency: float = 1.2) -> Reconciliation:
    """Reconcile Bob's key to Alice's, charging the ideal leakage times the efficiency."""
    a = as_bits(alice_key)
    b = as_bits(bob_key)
    if a.size != b.size:
        raise InvalidInput("keys must have equal length")
    if qber >= 0.5:
        raise ReconciliationImpossible(f"qber {qber} leaves no mutual information")
    return Reconciliation(a.copy(), leaked_bits_for(a.size, qber, ec_efficiency))


def secret_length(n: int, qber: float, leaked_bits: int, security_parameter: int) -> int:
    return math.floor(n * (1.0 - binary_entropy(qber))) - leaked_bits - security_parameter


def privacy_amplify(key, leaked_bits: int, qber: float, security_parameter: int, pa_seed) -> np.ndarray:
    """Compress ``key`` with a public Toeplitz seed.

    ``pa_seed`` is either a bit array (its first ``r + n - 1`` bits are used)
    or a Generator from which exactly that many bits are drawn.
    """
    key = as_bits(key)
    n = key.size
    if n == 0:
        raise InvalidInput("key must be nonempty")
    r = secret_length(n, qber, leaked_bits, security_parameter)
    if r <= 0:
        raise KeyExhausted(f"no secret bits left (r={r})")
    need = r + n - 1
    if isinstance(pa_seed, np.random.Generator):
        seed = random_bits(pa_seed, need)
    else:
        seed = as_bits(pa_seed)
        if seed.size < need:
            raise InvalidInput(f"pa_seed has {seed.size} bits, need {need}")
        seed = seed[:need]
    return toeplitz_tag(seed, key, r)


def run_session(
    params: SessionParams,
    channel: ChannelModel,
    rng: np.random.Generator,
    pool: SecretKeyPool | None = None,
) -> SessionOutcome:
    """Run one BB84 session end to end; deposits the key into ``pool`` on success."""
    n = params.n_qubits
    alice_bits = random_bits(rng, n)
    alice_bases = random_bits(rng, n)
    received = transmit(encode(alice_bits, alice_bases), channel, rng)
    bob_bases = random_bits(rng, n)
    detections = measure(received, bob_bases, rng)

    kept = sift(alice_bases, bob_bases, detections.detected)
    alice_sifted = alice_bits[kept]
    bob_sifted = detections.bits[kept]
    sifted = int(kept.size)

    k = math.ceil(params.sample_fraction * sifted)
    if k == 0 or k >= sifted:
        return SessionOutcome("aborted", 0.0, sifted, 0, reason="InsufficientSample")
    sample = np.sort(rng.choice(sifted, size=k, replace=False))
    qber = estimate_qber(alice_sifted, bob_sifted, sample)
    if qber > params.qber_threshold:
        return SessionOutcome("aborted", qber, sifted, 0, reason=EavesdropperSuspected.reason)

    mask = np.ones(sifted, dtype=bool)
    mask[sample] = False
    try:
        rec = correct_errors(alice_sifted[mask], bob_sifted[mask], qber, params.ec_efficiency)
        secret = privacy_amplify(rec.key, rec.leaked_bits, qber, params.security_parameter, rng)
    except ReconciliationImpossible:
        return SessionOutcome("aborted", qber, sifted, 0, reason=EavesdropperSuspected.reason)
    except QkdAbort as exc:
        return SessionOutcome("aborted", qber, sifted, 0, reason=exc.reason)

    if pool is not None:
        pool.deposit(secret)
    return SessionOutcome("key", qber, sifted, int(secret.size), key=secret)
