import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsbnet.errors import InsufficientSample, InvalidInput, KeyExhausted, ReconciliationImpossible
from qsbnet.qcrypto import SecretKeyPool
from qsbnet.qkd import (
    Basis,
    ChannelModel,
    SessionParams,
    binary_entropy,
    correct_errors,
    encode,
    estimate_qber,
    measure,
    privacy_amplify,
    run_session,
    sift,
    transmit,
)


def entropy_by_series(p):
    # Independent of binary_entropy: natural logs, converted at the end.
    return (-p * math.log(p) - (1 - p) * math.log1p(-p)) / math.log(2)


def test_encode_single_qubit():
    q = encode([1], [Basis.RECTILINEAR])
    assert len(q) == 1
    assert q[0].bit == 1 and q[0].basis is Basis.RECTILINEAR and not q[0].lost


def test_encode_diagonal_pair():
    q = encode([0, 1], [Basis.DIAGONAL, Basis.DIAGONAL])
    assert [x.bit for x in q] == [0, 1]
    assert all(x.basis is Basis.DIAGONAL for x in q)


def test_encode_length_mismatch():
    with pytest.raises(InvalidInput):
        encode([0, 1, 1], [Basis.RECTILINEAR, Basis.DIAGONAL])


def test_identity_channel_changes_nothing():
    rng = np.random.default_rng(1)
    q = encode(rng.integers(0, 2, 500), rng.integers(0, 2, 500))
    out = transmit(q, ChannelModel(), np.random.default_rng(2))
    assert np.array_equal(out.bits, q.bits)
    assert np.array_equal(out.bases, q.bases)
    assert not out.lost.any()


def test_full_loss():
    q = encode([0, 1, 1, 0], [0, 1, 0, 1])
    out = transmit(q, ChannelModel(loss_probability=1.0), np.random.default_rng(0))
    assert out.lost.all()


def test_intercept_resend_error_rate():
    rng = np.random.default_rng(7)
    n = 100_000
    bits = rng.integers(0, 2, n)
    bases = rng.integers(0, 2, n)
    out = transmit(encode(bits, bases), ChannelModel(eavesdrop_fraction=1.0), rng)
    det = measure(out, bases, rng)
    assert abs(np.mean(det.bits != bits) - 0.25) <= 0.02


def test_measure_matched_basis():
    q = encode([1], [Basis.RECTILINEAR])
    assert measure(q, [Basis.RECTILINEAR], np.random.default_rng(0)).bits[0] == 1


def test_measure_mismatched_basis_is_uniform():
    n = 10_000
    q = encode(np.ones(n), np.zeros(n))
    det = measure(q, np.ones(n), np.random.default_rng(3))
    assert abs(det.bits.mean() - 0.5) <= 0.02


def test_measure_lost_qubit_not_detected():
    q = transmit(encode([1], [0]), ChannelModel(loss_probability=1.0), np.random.default_rng(0))
    assert not measure(q, [0], np.random.default_rng(0)).detected[0]


def test_measure_length_mismatch():
    with pytest.raises(InvalidInput):
        measure(encode([1, 0], [0, 0]), [0], np.random.default_rng(0))


def test_sift_rules():
    assert list(sift([0, 1, 1], [0, 1, 1], [True] * 3)) == [0, 1, 2]
    assert list(sift([0, 1, 0], [1, 0, 1], [True] * 3)) == []
    assert list(sift([0, 1, 0], [0, 1, 0], [True, False, True])) == [0, 2]
    with pytest.raises(InvalidInput):
        sift([0], [0, 1], [True, True])


def test_sift_fraction_half():
    rng = np.random.default_rng(11)
    n = 100_000
    kept = sift(rng.integers(0, 2, n), rng.integers(0, 2, n), np.ones(n, bool))
    assert abs(kept.size / n - 0.5) <= 0.01


def test_estimate_qber():
    a = np.array([0, 1, 1, 0, 1])
    assert estimate_qber(a, a, [0, 2, 4]) == 0.0
    assert estimate_qber(a, 1 - a, [0, 1, 2, 3, 4]) == 1.0
    with pytest.raises(InsufficientSample):
        estimate_qber(a, a, [])


def test_intercept_resend_session_qber():
    params = SessionParams(n_qubits=10_000, sample_fraction=0.2, qber_threshold=1.0)
    out = run_session(params, ChannelModel(eavesdrop_fraction=1.0), np.random.default_rng(5))
    assert out.qber_estimate == pytest.approx(0.25, abs=0.04)


def test_correct_errors_examples():
    key = np.random.default_rng(0).integers(0, 2, 1000)
    rec = correct_errors(key, key, 0.0, 1.2)
    assert rec.leaked_bits == 0 and np.array_equal(rec.key, key)
    with pytest.raises(ReconciliationImpossible):
        correct_errors(key, key, 0.5, 1.2)
    expected = math.ceil(1.2 * 1000 * entropy_by_series(0.11))
    assert expected == 600
    assert correct_errors(key, key, 0.11, 1.2).leaked_bits == 600


def test_correct_errors_returns_alice_key():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 2, 200)
    b = a.copy()
    b[:10] ^= 1
    assert np.array_equal(correct_errors(a, b, 0.05).key, a)


def test_binary_entropy_matches_series():
    for p in (0.01, 0.05, 0.11, 0.3, 0.5):
        assert binary_entropy(p) == pytest.approx(entropy_by_series(p), abs=1e-12)
    assert binary_entropy(0.0) == 0.0


def test_privacy_amplify_lengths():
    rng = np.random.default_rng(0)
    assert privacy_amplify(rng.integers(0, 2, 100), 0, 0.0, 0, rng).size == 100
    with pytest.raises(KeyExhausted):
        privacy_amplify(rng.integers(0, 2, 20), 0, 0.0, 30, rng)
    expected = math.floor(10000 * (1 - entropy_by_series(0.05))) - 343 - 64
    assert expected == 6729
    assert privacy_amplify(rng.integers(0, 2, 10000), 343, 0.05, 64, rng).size == 6729


def test_privacy_amplify_uses_seed_prefix():
    key = np.random.default_rng(1).integers(0, 2, 50)
    seed = np.random.default_rng(2).integers(0, 2, 200)
    a = privacy_amplify(key, 0, 0.0, 10, seed)
    b = privacy_amplify(key, 0, 0.0, 10, seed[: 40 + 50 - 1])
    assert np.array_equal(a, b)


def test_ideal_session_length():
    n, s = 100_000, 64
    params = SessionParams(n_qubits=n, sample_fraction=0.1, security_parameter=s)
    out = run_session(params, ChannelModel(), np.random.default_rng(9))
    assert out.ok and out.qber_estimate == 0.0
    remaining = out.sifted_length - math.ceil(0.1 * out.sifted_length)
    assert out.final_length == remaining - s
    assert out.final_length == pytest.approx(0.5 * n * 0.9 - s, rel=0.02)


def test_session_deposits_into_pool():
    pool = SecretKeyPool(("a", "b"))
    out = run_session(SessionParams(n_qubits=4000), ChannelModel(), np.random.default_rng(1), pool)
    assert pool.deposited == out.final_length > 0


def test_session_invalid_params():
    with pytest.raises(InvalidInput):
        SessionParams(n_qubits=0)
    with pytest.raises(InvalidInput):
        SessionParams(n_qubits=10, sample_fraction=1.0)
    with pytest.raises(InvalidInput):
        ChannelModel(loss_probability=1.5)


def test_eavesdropped_session_aborts():
    params = SessionParams(n_qubits=4000)
    out = run_session(params, ChannelModel(eavesdrop_fraction=1.0), np.random.default_rng(3))
    assert not out.ok and out.reason == "EavesdropperSuspected" and out.key is None


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(50, 3000))
def test_ideal_channel_sifted_keys_identical(seed, n):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, n)
    a_bases = rng.integers(0, 2, n)
    b_bases = rng.integers(0, 2, n)
    det = measure(transmit(encode(bits, a_bases), ChannelModel(), rng), b_bases, rng)
    kept = sift(a_bases, b_bases, det.detected)
    assert np.array_equal(bits[kept], det.bits[kept])


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    flip=st.floats(0, 0.3),
    eve=st.floats(0, 1),
    loss=st.floats(0, 0.5),
)
def test_session_never_keys_above_threshold(seed, flip, eve, loss):
    params = SessionParams(n_qubits=2000, security_parameter=16)
    channel = ChannelModel(loss_probability=loss, flip_probability=flip, eavesdrop_fraction=eve)
    out = run_session(params, channel, np.random.default_rng(seed))
    if out.ok:
        assert out.qber_estimate <= params.qber_threshold
        assert out.final_length > 0 and out.key.size == out.final_length
    # Same seed, same outcome.
    again = run_session(params, channel, np.random.default_rng(seed))
    assert again.status == out.status and again.final_length == out.final_length
    assert again.qber_estimate == out.qber_estimate
    if out.ok:
        assert np.array_equal(again.key, out.key)
