"""Bit-string helpers. Bit strings are 1-D ``uint8`` arrays holding 0/1."""

from __future__ import annotations

import numpy as np


def as_bits(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.uint8).reshape(-1)
    if arr.size and arr.max() > 1:
        raise ValueError("bit strings may only contain 0 and 1")
    return arr


def random_bits(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 2, size=n, dtype=np.uint8)


def bytes_to_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def bits_to_bytes(bits) -> bytes:
    """Pack bits MSB-first; a trailing partial byte is zero padded."""
    return np.packbits(as_bits(bits)).tobytes()


def bits_to_str(bits) -> str:
    return "".join("1" if b else "0" for b in as_bits(bits))
