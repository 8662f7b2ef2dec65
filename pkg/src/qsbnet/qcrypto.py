"""Toeplitz hashing, one-time pads and consume-once key pools.

Key material lives in :class:`SecretKeyPool` objects, one per unordered node
pair. Both endpoints of a pair hold identical copies of the buffer; the
simulator keeps a single object and models the peer's copy with
:meth:`SecretKeyPool.read`, which only exposes bits the owner has already
drawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .bits import as_bits
from .errors import (
    InternalError,
    InvalidInput,
    InvalidSeed,
    KeyStarved,
    KeyTooShort,
    PoolDesync,
    RelayFailed,
    SigningFailed,
)

# Above this many multiply-adds the FFT path is cheaper than direct convolution.
_FFT_THRESHOLD = 1 << 21


def toeplitz_tag(seed, message, tag_length: int) -> np.ndarray:
    """Hash ``message`` with the Toeplitz matrix generated by ``seed``.

    The matrix is ``T[i][j] = seed[i + (m - 1) - j]`` for a message of ``m``
    bits, and the result is ``T @ message`` over GF(2).
    """
    seed = as_bits(seed)
    message = as_bits(message)
    m = message.size
    if tag_length < 0:
        raise InvalidInput("tag_length must be non-negative")
    if m == 0 or tag_length == 0:
        if seed.size != max(tag_length + m - 1, 0):
            raise InvalidSeed(f"seed has {seed.size} bits, need {max(tag_length + m - 1, 0)}")
        return np.zeros(tag_length, dtype=np.uint8)
    if seed.size != tag_length + m - 1:
        raise InvalidSeed(f"seed has {seed.size} bits, need {tag_length + m - 1}")
    # tag[i] = sum_j seed[i + m - 1 - j] * msg[j], i.e. entry i + m - 1 of the
    # full convolution of seed with message.
    if tag_length * m > _FFT_THRESHOLD:
        conv = np.rint(fftconvolve(seed.astype(np.float64), message.astype(np.float64)))
        conv = conv.astype(np.int64)
    else:
        conv = np.convolve(seed.astype(np.int64), message.astype(np.int64))
    return (conv[m - 1 : m - 1 + tag_length] & 1).astype(np.uint8)


def otp_apply(key, data) -> np.ndarray:
    """XOR ``data`` with the leading bits of ``key``. Encrypting twice decrypts."""
    key = as_bits(key)
    data = as_bits(data)
    if key.size < data.size:
        raise KeyTooShort(f"key has {key.size} bits, data has {data.size}")
    return np.bitwise_xor(key[: data.size], data)


def pair_key(a: str, b: str) -> tuple[str, str]:
    if a == b:
        raise InvalidInput(f"a key pool needs two distinct nodes, got {a!r} twice")
    return (a, b) if a < b else (b, a)


@dataclass
class SecretKeyPool:
    """Shared key buffer of one node pair.

    ``consumed`` only moves forward during normal operation, so every bit is
    handed out at most once.
    """

    pair: tuple[str, str]
    buffer: bytearray = field(default_factory=bytearray)
    consumed: int = 0
    epoch: int = 0

    @property
    def deposited(self) -> int:
        return len(self.buffer)

    @property
    def remaining(self) -> int:
        return len(self.buffer) - self.consumed

    def deposit(self, bits) -> None:
        bits = as_bits(bits)
        self.buffer.extend(bits.tobytes())
        self.epoch += 1

    def draw(self, n_bits: int) -> tuple[int, np.ndarray]:
        """Spend the next ``n_bits``; returns ``(offset, bits)``."""
        if n_bits <= 0:
            raise InvalidInput("n_bits must be positive")
        if self.remaining < n_bits:
            raise KeyStarved(self.pair, n_bits, self.remaining)
        offset = self.consumed
        out = np.frombuffer(bytes(self.buffer[offset : offset + n_bits]), dtype=np.uint8).copy()
        self.consumed += n_bits
        return offset, out

    def read(self, offset: int, n_bits: int) -> np.ndarray:
        """Peer-side view of bits the owner already drew at ``offset``."""
        if offset < 0 or n_bits < 0 or offset + n_bits > self.consumed:
            raise PoolDesync(
                f"pool {self.pair}: range [{offset}, {offset + n_bits}) not drawn (consumed={self.consumed})"
            )
        return np.frombuffer(bytes(self.buffer[offset : offset + n_bits]), dtype=np.uint8).copy()

    def snapshot(self) -> tuple[int, int, int]:
        return (len(self.buffer), self.consumed, self.epoch)

    def restore(self, snap: tuple[int, int, int]) -> None:
        # Only valid for draws whose bits never left the node (aborted attempts).
        length, consumed, epoch = snap
        del self.buffer[length:]
        self.consumed = consumed
        self.epoch = epoch


class KeyPools:
    """Table of key pools keyed by unordered node pair."""

    def __init__(self) -> None:
        self._pools: dict[tuple[str, str], SecretKeyPool] = {}

    def get(self, a: str, b: str) -> SecretKeyPool | None:
        if a == b:
            return None
        return self._pools.get(pair_key(a, b))

    def ensure(self, a: str, b: str) -> SecretKeyPool:
        key = pair_key(a, b)
        pool = self._pools.get(key)
        if pool is None:
            pool = self._pools[key] = SecretKeyPool(key)
        return pool

    def __contains__(self, pair) -> bool:
        return pair_key(*pair) in self._pools

    def __iter__(self):
        return iter(sorted(self._pools.values(), key=lambda p: p.pair))

    def __len__(self) -> int:
        return len(self._pools)

    def snapshot(self) -> dict:
        return {k: p.snapshot() for k, p in self._pools.items()}

    def restore(self, snap: dict) -> None:
        for key in list(self._pools):
            if key not in snap:
                del self._pools[key]
        for key, state in snap.items():
            self._pools[key].restore(state)


def draw_key(pool: SecretKeyPool, n_bits: int) -> np.ndarray:
    return pool.draw(n_bits)[1]


def relay_key(path: Sequence[str], pools: KeyPools, n_bits: int) -> np.ndarray:
    """Deliver an ``n_bits`` key between the ends of ``path`` by trusted relay.

    The first hop's fresh key becomes the end-to-end key; each further hop
    forwards it one-time-pad encrypted under that hop's own key.
    """
    if len(path) < 2:
        raise InvalidInput("relay path needs at least two nodes")
    if n_bits <= 0:
        raise InvalidInput("n_bits must be positive")
    hops = list(zip(path[:-1], path[1:]))
    hop_pools = []
    for hop in hops:
        pool = pools.get(*hop)
        if pool is None:
            raise RelayFailed(hop)
        if pool.remaining < n_bits:
            raise RelayFailed(hop, KeyStarved(pool.pair, n_bits, pool.remaining))
        hop_pools.append(pool)

    _, end_to_end = hop_pools[0].draw(n_bits)
    carried = end_to_end
    for pool in hop_pools[1:]:
        offset, hop_key = pool.draw(n_bits)
        ciphertext = otp_apply(hop_key, carried)
        carried = otp_apply(pool.read(offset, n_bits), ciphertext)
    if not np.array_equal(carried, end_to_end):
        raise InternalError("relay endpoints disagree")
    return end_to_end


@dataclass(frozen=True)
class Tag:
    """One verifier's MAC tag plus the pool offset its key material came from."""

    offset: int
    length: int
    value: int

    @classmethod
    def from_bits(cls, offset: int, bits) -> "Tag":
        bits = as_bits(bits)
        value = 0
        for b in bits.tolist():
            value = (value << 1) | b
        return cls(offset, int(bits.size), value)

    def to_bits(self) -> np.ndarray:
        return np.array(
            [(self.value >> (self.length - 1 - i)) & 1 for i in range(self.length)],
            dtype=np.uint8,
        )


TagSet = dict  # verifier id -> Tag


def mac_material_length(message_length: int, tag_length: int) -> int:
    """Bits consumed per verifier: Toeplitz seed plus the tag mask."""
    return (tag_length + message_length - 1) + tag_length


def _masked_tag(material: np.ndarray, message: np.ndarray, tag_length: int) -> np.ndarray:
    seed_len = tag_length + message.size - 1
    digest = toeplitz_tag(material[:seed_len], message, tag_length)
    return otp_apply(material[seed_len : seed_len + tag_length], digest)


def sign_transaction(
    message, sender: str, verifiers: Iterable[str], pools: KeyPools, tag_length: int
) -> TagSet:
    """Produce one OTP-masked Toeplitz MAC per verifier.

    Either every tag is produced or no pool is touched.
    """
    message = as_bits(message)
    if message.size == 0 or tag_length <= 0:
        raise InvalidInput("message and tag must be nonempty")
    need = mac_material_length(message.size, tag_length)
    verifiers = list(verifiers)
    chosen = []
    for v in verifiers:
        pool = pools.get(sender, v)
        if pool is None:
            raise SigningFailed(v)
        if pool.remaining < need:
            raise SigningFailed(v, KeyStarved(pool.pair, need, pool.remaining))
        chosen.append(pool)
    tags: TagSet = {}
    for v, pool in zip(verifiers, chosen):
        offset, material = pool.draw(need)
        tags[v] = Tag.from_bits(offset, _masked_tag(material, message, tag_length))
    return tags


def verify_tag(message, tag: Tag, verifier: str, sender: str, pools: KeyPools) -> bool:
    """Recompute the tag from the verifier's pool copy; raises PoolDesync on bad offsets."""
    message = as_bits(message)
    pool = pools.get(sender, verifier)
    if pool is None or tag.length <= 0 or message.size == 0:
        return False
    material = pool.read(tag.offset, mac_material_length(message.size, tag.length))
    expected = _masked_tag(material, message, tag.length)
    return Tag.from_bits(tag.offset, expected).value == tag.value
