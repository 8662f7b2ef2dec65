import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsbnet.errors import (
    InvalidInput,
    InvalidSeed,
    KeyStarved,
    KeyTooShort,
    PoolDesync,
    RelayFailed,
    SigningFailed,
)
from qsbnet.qcrypto import (
    KeyPools,
    SecretKeyPool,
    Tag,
    draw_key,
    mac_material_length,
    otp_apply,
    relay_key,
    sign_transaction,
    toeplitz_tag,
    verify_tag,
)


def toeplitz_by_matrix(seed, msg, t):
    """Explicit matrix build, the definition written out longhand."""
    m = len(msg)
    T = np.zeros((t, m), dtype=int)
    for i in range(t):
        for j in range(m):
            T[i, j] = seed[i + (m - 1) - j]
    return (T @ np.asarray(msg, dtype=int)) % 2


def filled_pools(pairs, bits=5000, seed=0):
    rng = np.random.default_rng(seed)
    pools = KeyPools()
    for a, b in pairs:
        pools.ensure(a, b).deposit(rng.integers(0, 2, bits))
    return pools


def test_toeplitz_zero_seed():
    assert not toeplitz_tag(np.zeros(9), [1, 0, 1, 1, 0], 5).any()


def test_toeplitz_identity():
    assert list(toeplitz_tag([1], [1], 1)) == [1]


def test_toeplitz_hand_example():
    assert list(toeplitz_tag([1, 0, 1, 1], [1, 1, 0], 2)) == [1, 0]
    assert list(toeplitz_by_matrix([1, 0, 1, 1], [1, 1, 0], 2)) == [1, 0]


def test_toeplitz_bad_seed_length():
    with pytest.raises(InvalidSeed):
        toeplitz_tag([1, 0, 1], [1, 1, 0], 2)


@settings(max_examples=60, deadline=None)
@given(data=st.data(), t=st.integers(1, 24), m=st.integers(1, 40))
def test_toeplitz_matches_matrix(data, t, m):
    seed = data.draw(st.lists(st.integers(0, 1), min_size=t + m - 1, max_size=t + m - 1))
    msg = data.draw(st.lists(st.integers(0, 1), min_size=m, max_size=m))
    assert list(toeplitz_tag(seed, msg, t)) == list(toeplitz_by_matrix(seed, msg, t))


def test_toeplitz_fft_path_matches_direct():
    rng = np.random.default_rng(4)
    t, m = 1500, 2000  # t*m above the FFT switch-over
    seed = rng.integers(0, 2, t + m - 1)
    msg = rng.integers(0, 2, m)
    direct = np.convolve(seed, msg)[m - 1 : m - 1 + t] % 2
    assert np.array_equal(toeplitz_tag(seed, msg, t), direct)


def test_otp_examples():
    data = np.array([1, 0, 1, 1])
    assert np.array_equal(otp_apply(np.zeros(4), data), data)
    assert list(otp_apply([1, 0, 1], [1, 1, 1])) == [0, 1, 0]
    with pytest.raises(KeyTooShort):
        otp_apply([1], [1, 0])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), max_size=200))
def test_otp_involution(pairs):
    key = [k for k, _ in pairs]
    data = [d for _, d in pairs]
    assert list(otp_apply(key, otp_apply(key, data))) == data


def test_draw_key_exhaustion_and_disjointness():
    pool = SecretKeyPool(("a", "b"))
    pool.deposit(np.arange(10) % 2)
    assert draw_key(pool, 10).size == 10
    with pytest.raises(KeyStarved):
        draw_key(pool, 1)
    pool2 = SecretKeyPool(("a", "b"))
    pool2.deposit(np.random.default_rng(0).integers(0, 2, 100))
    o1, _ = pool2.draw(30)
    o2, _ = pool2.draw(30)
    assert o1 + 30 <= o2
    with pytest.raises(InvalidInput):
        draw_key(pool2, 0)


def test_pool_read_only_exposes_drawn_bits():
    pool = SecretKeyPool(("a", "b"))
    pool.deposit(np.ones(20))
    with pytest.raises(PoolDesync):
        pool.read(0, 5)
    pool.draw(5)
    assert pool.read(0, 5).sum() == 5


def test_relay_two_nodes_equals_direct_draw():
    a = filled_pools([("a", "b")])
    b = filled_pools([("a", "b")])
    assert np.array_equal(relay_key(["a", "b"], a, 64), draw_key(b.get("a", "b"), 64))


def test_relay_three_nodes():
    pools = filled_pools([("a", "b"), ("b", "c")])
    k1 = pools.get("a", "b").buffer[:64]
    k = relay_key(["a", "b", "c"], pools, 64)
    # XOR chain oracle: K ^ k2 ^ k2 = K, and K is the first hop's fresh key.
    assert bytes(k.tobytes()) == bytes(k1)
    assert pools.get("a", "b").consumed == 64 and pools.get("b", "c").consumed == 64


def test_relay_middle_pool_empty():
    pools = filled_pools([("a", "b")])
    pools.ensure("b", "c")
    with pytest.raises(RelayFailed) as err:
        relay_key(["a", "b", "c"], pools, 64)
    assert err.value.hop == ("b", "c")
    assert pools.get("a", "b").consumed == 0


def test_sign_verify_roundtrip():
    pools = filled_pools([("s", "v")])
    msg = np.random.default_rng(1).integers(0, 2, 256)
    tags = sign_transaction(msg, "s", ["v"], pools, 32)
    assert list(tags) == ["v"]
    assert verify_tag(msg, tags["v"], "v", "s", pools)
    assert pools.get("s", "v").consumed == mac_material_length(256, 32)


def test_sign_without_pool_fails_cleanly():
    pools = filled_pools([("s", "v")])
    with pytest.raises(SigningFailed) as err:
        sign_transaction([1, 0, 1], "s", ["v", "w"], pools, 16)
    assert err.value.verifier == "w"
    assert pools.get("s", "v").consumed == 0


def test_altered_message_fails_everywhere():
    rng = np.random.default_rng(8)
    t, m = 16, 64
    failures = 0
    for _ in range(10_000):
        pools = KeyPools()
        pools.ensure("s", "v").deposit(rng.integers(0, 2, mac_material_length(m, t)))
        msg = rng.integers(0, 2, m)
        tag = sign_transaction(msg, "s", ["v"], pools, t)["v"]
        bad = msg.copy()
        bad[rng.integers(m)] ^= 1
        failures += verify_tag(bad, tag, "v", "s", pools)
    rate = failures / 10_000
    p = 2.0**-16
    assert rate <= p + 3 * np.sqrt(p * (1 - p) / 10_000)


def test_random_tags_rejected():
    pools = filled_pools([("s", "v")], bits=200)
    msg = np.random.default_rng(2).integers(0, 2, 64)
    real = sign_transaction(msg, "s", ["v"], pools, 32)["v"]
    rng = np.random.default_rng(3)
    accepted = 0
    for _ in range(2000):
        forged = Tag(real.offset, 32, int(rng.integers(0, 2**32)))
        if forged.value != real.value:
            accepted += verify_tag(msg, forged, "v", "s", pools)
    assert accepted == 0


def test_verify_out_of_range_offset():
    pools = filled_pools([("s", "v")], bits=100)
    with pytest.raises(PoolDesync):
        verify_tag([1, 0, 1, 1], Tag(50, 8, 3), "v", "s", pools)


def test_verify_without_pool_is_false():
    assert not verify_tag([1, 0], Tag(0, 8, 1), "x", "y", KeyPools())


def test_tag_bits_roundtrip():
    bits = np.array([1, 0, 0, 1, 1, 1, 0, 1, 0, 1])
    assert np.array_equal(Tag.from_bits(7, bits).to_bits(), bits)


def test_pools_snapshot_restore():
    pools = filled_pools([("a", "b"), ("b", "c")])
    snap = pools.snapshot()
    pools.get("a", "b").draw(100)
    pools.ensure("c", "d")
    pools.restore(snap)
    assert pools.get("a", "b").consumed == 0
    assert pools.get("c", "d") is None
