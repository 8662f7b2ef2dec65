"""Exception types shared across the simulator."""

from __future__ import annotations


class QsbError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(QsbError, ValueError):
    pass


class InsufficientSample(QsbError):
    pass


class ReconciliationImpossible(QsbError):
    pass


class QkdAbort(QsbError):
    """A QKD session ended without producing key material."""

    reason = "Aborted"


class EavesdropperSuspected(QkdAbort):
    reason = "EavesdropperSuspected"


class KeyExhausted(QkdAbort):
    reason = "KeyExhausted"


class InvalidSeed(QsbError, ValueError):
    pass


class KeyTooShort(QsbError, ValueError):
    pass


class KeyStarved(QsbError):
    def __init__(self, pair, requested: int, available: int):
        super().__init__(f"pool {pair} has {available} bits, {requested} requested")
        self.pair = pair
        self.requested = requested
        self.available = available


class RelayFailed(QsbError):
    def __init__(self, hop, cause: Exception | None = None):
        super().__init__(f"relay failed at hop {hop}")
        self.hop = hop
        self.cause = cause


class SigningFailed(QsbError):
    def __init__(self, verifier, cause: Exception | None = None):
        super().__init__(f"cannot sign for verifier {verifier!r}")
        self.verifier = verifier
        self.cause = cause


class PoolDesync(QsbError):
    pass


class TransactionFailed(QsbError):
    pass


class InvalidBlock(QsbError):
    pass


class AppendRejected(QsbError):
    pass


class ConfigError(QsbError):
    """Invalid scenario configuration; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class NoRoute(QsbError):
    pass


class NoWavelength(QsbError):
    pass


class InternalError(QsbError):
    pass


class InvariantViolation(QsbError):
    pass
