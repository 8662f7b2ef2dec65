"""Transactions, Merkle roots, hash-chained blocks and per-node ledgers.

All hashing is SHA-256 over a canonical encoding: big-endian fixed-width
integers, u32 length prefixes on byte strings, fields in declaration order.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bits import bits_to_bytes, bytes_to_bits, random_bits
from .errors import (
    AppendRejected,
    InvalidBlock,
    InvalidInput,
    KeyStarved,
    PoolDesync,
    SigningFailed,
    TransactionFailed,
)
from .qcrypto import KeyPools, Tag, otp_apply, sign_transaction, verify_tag

HASH_NAME = "sha256"
ZERO_HASH = bytes(32)
DEFAULT_TX_TAG_LENGTH = 32


def H(data: bytes) -> bytes:
    return hashlib.new(HASH_NAME, data).digest()


def _u8(v: int) -> bytes:
    return struct.pack(">B", v)


def _u32(v: int) -> bytes:
    return struct.pack(">I", v)


def _u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def _lp(data: bytes) -> bytes:
    return _u32(len(data)) + data


def _str(s: str) -> bytes:
    return _lp(s.encode("utf-8"))


class TxKind(IntEnum):
    GENERIC = 0
    LIGHTPATH_ESTABLISH = 1
    LIGHTPATH_RELEASE = 2


class Verdict(Enum):
    ACCEPT = "accept"
    REJECT = "reject"


@dataclass(frozen=True)
class KeyShare:
    """The payload key, wrapped for one verifier under pool bits at ``offset``."""

    offset: int
    wrapped: bytes


@dataclass(frozen=True)
class Transaction:
    id: str
    sender: str
    payload_ciphertext: bytes
    timestamp: int  # simulated microseconds
    tags: dict = field(default_factory=dict)  # verifier -> Tag
    kind: TxKind = TxKind.GENERIC
    key_shares: dict = field(default_factory=dict)  # verifier -> KeyShare

    def body_bytes(self) -> bytes:
        """Everything the MAC tags cover."""
        out = [_str(self.id), _str(self.sender), _u8(int(self.kind)), _u64(self.timestamp)]
        out.append(_lp(self.payload_ciphertext))
        out.append(_u32(len(self.key_shares)))
        for v in sorted(self.key_shares):
            share = self.key_shares[v]
            out += [_str(v), _u64(share.offset), _lp(share.wrapped)]
        return b"".join(out)

    def digest(self) -> bytes:
        return H(self.body_bytes())

    def to_bytes(self) -> bytes:
        out = [self.body_bytes(), _u32(len(self.tags))]
        for v in sorted(self.tags):
            tag = self.tags[v]
            out += [_str(v), _u64(tag.offset), _u32(tag.length)]
            out.append(_lp(tag.value.to_bytes(max(1, math.ceil(tag.length / 8)), "big")))
        return b"".join(out)


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int  # simulated microseconds

    def to_bytes(self) -> bytes:
        return _u64(self.height) + self.prev_hash + self.merkle_root + _u64(self.timestamp)


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple = ()
    hash: bytes = b""  # stored fingerprint; audit compares it to block_hash(header)

    @classmethod
    def seal(cls, header: BlockHeader, transactions: Sequence[Transaction] = ()) -> "Block":
        return cls(header, tuple(transactions), block_hash(header))

    @property
    def height(self) -> int:
        return self.header.height

    def to_bytes(self) -> bytes:
        return (
            self.header.to_bytes()
            + self.hash
            + _u32(len(self.transactions))
            + b"".join(_lp(tx.to_bytes()) for tx in self.transactions)
        )


def block_hash(header: BlockHeader) -> bytes:
    return H(header.to_bytes())


def merkle_root(txs: Sequence[Transaction]) -> bytes:
    if not txs:
        raise InvalidInput("merkle_root of an empty transaction list")
    level = [H(b"\x00" + tx.to_bytes()) for tx in txs]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [H(b"\x01" + level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def _block_merkle(txs: Sequence[Transaction]) -> bytes:
    # Empty blocks (genesis) carry an all-zero root.
    return merkle_root(txs) if txs else ZERO_HASH


def genesis_block(timestamp: int = 0) -> Block:
    return Block.seal(BlockHeader(0, ZERO_HASH, ZERO_HASH, timestamp))


# -- transactions -------------------------------------------------------------


def make_transaction(
    payload: bytes,
    sender: str,
    verifiers: Iterable[str],
    pools: KeyPools,
    time: int,
    *,
    kind: TxKind = TxKind.GENERIC,
    tx_id: str | None = None,
    tag_length: int = DEFAULT_TX_TAG_LENGTH,
    rng: np.random.Generator | None = None,
) -> Transaction:
    """Encrypt ``payload`` under a fresh one-time key and MAC it for every verifier.

    The payload key is wrapped separately for each verifier with bits from the
    pair's pool. On any key shortage no pool is left debited.
    """
    verifiers = [v for v in verifiers if v != sender]
    if not verifiers:
        raise InvalidInput("a transaction needs at least one verifier")
    rng = rng if rng is not None else np.random.default_rng()
    if tx_id is None:
        tx_id = H(_str(sender) + _u64(time) + payload).hex()[:16]
    snap = pools.snapshot()
    try:
        plain = bytes_to_bits(payload)
        shares = {}
        ciphertext = b""
        if plain.size:
            payload_key = random_bits(rng, plain.size)
            ciphertext = bits_to_bytes(otp_apply(payload_key, plain))
            for v in verifiers:
                pool = pools.get(sender, v)
                if pool is None:
                    raise SigningFailed(v)
                offset, wrap_key = pool.draw(plain.size)
                shares[v] = KeyShare(offset, bits_to_bytes(otp_apply(wrap_key, payload_key)))
        unsigned = Transaction(tx_id, sender, ciphertext, time, {}, kind, shares)
        tags = sign_transaction(bytes_to_bits(unsigned.digest()), sender, verifiers, pools, tag_length)
    except (KeyStarved, SigningFailed) as exc:
        pools.restore(snap)
        raise TransactionFailed(f"transaction from {sender!r}: {exc}") from exc
    return replace(unsigned, tags=tags)


def decrypt_payload(tx: Transaction, verifier: str, pools: KeyPools) -> bytes:
    if not tx.payload_ciphertext:
        return b""
    share = tx.key_shares[verifier]
    n = len(tx.payload_ciphertext) * 8
    pool = pools.get(tx.sender, verifier)
    if pool is None:
        raise PoolDesync(f"{verifier!r} shares no pool with {tx.sender!r}")
    payload_key = otp_apply(pool.read(share.offset, n), bytes_to_bits(share.wrapped))
    return bits_to_bytes(otp_apply(payload_key, bytes_to_bits(tx.payload_ciphertext)))


def default_quorum(n_validators: int) -> int:
    return math.ceil(2 * n_validators / 3)


def check_own_tag(tx: Transaction, validator: str, pools: KeyPools) -> bool:
    """One validator's local test: does its own tag verify?"""
    tag = tx.tags.get(validator)
    if tag is None:
        return False
    try:
        return verify_tag(bytes_to_bits(tx.digest()), tag, validator, tx.sender, pools)
    except PoolDesync:
        return False


def validate_transaction(
    tx: Transaction, validators: Sequence[str], pools: KeyPools, quorum: int | None = None
) -> Verdict:
    if quorum is None:
        quorum = default_quorum(len(validators))
    if quorum > len(validators):
        raise InvalidInput(f"quorum {quorum} exceeds {len(validators)} validators")
    approvals = sum(check_own_tag(tx, v, pools) for v in validators)
    return Verdict.ACCEPT if approvals >= quorum and approvals > 0 else Verdict.REJECT


# -- blocks and ledgers -------------------------------------------------------


def assemble_block(
    txs: Sequence[Transaction],
    prev: Block | None,
    time: int,
    verdicts: Mapping[str, Verdict] | None = None,
) -> Block:
    txs = tuple(txs)
    verdicts = verdicts or {}
    for tx in txs:
        if verdicts.get(tx.id) is not Verdict.ACCEPT:
            raise InvalidBlock(f"transaction {tx.id} was not accepted")
    if prev is None:
        header = BlockHeader(0, ZERO_HASH, _block_merkle(txs), time)
    else:
        header = BlockHeader(prev.height + 1, prev.hash, _block_merkle(txs), time)
    return Block.seal(header, txs)


class Ledger:
    """One node's replica of the chain."""

    def __init__(self, owner: str, genesis: Block | None = None):
        self.owner = owner
        self.chain: list[Block] = [genesis if genesis is not None else genesis_block()]

    @property
    def tip(self) -> Block:
        return self.chain[-1]

    @property
    def height(self) -> int:
        return self.chain[-1].height

    def tip_hash(self) -> bytes:
        return self.chain[-1].hash

    def replica_digest(self) -> bytes:
        """Hash of every stored byte; differs between replicas iff their contents do."""
        h = hashlib.new(HASH_NAME)
        for block in self.chain:
            h.update(_lp(block.to_bytes()))
        return h.digest()

    def transaction_ids(self) -> list[str]:
        return [tx.id for block in self.chain for tx in block.transactions]

    def __len__(self) -> int:
        return len(self.chain)


def validate_block(ledger: Ledger, block: Block) -> str | None:
    """Return why ``block`` cannot extend ``ledger``, or None when it can."""
    tip = ledger.tip
    if block.height != tip.height + 1:
        return f"height {block.height} does not follow tip {tip.height}"
    if block.header.prev_hash != tip.hash:
        return "prev_hash does not match tip"
    if block.hash != block_hash(block.header):
        return "stored hash does not match header"
    if block.header.merkle_root != _block_merkle(block.transactions):
        return "merkle root mismatch"
    return None


def append_block(ledger: Ledger, block: Block) -> Ledger:
    problem = validate_block(ledger, block)
    if problem is not None:
        raise AppendRejected(f"{ledger.owner}: {problem}")
    ledger.chain.append(block)
    return ledger


def audit_chain(ledger: Ledger) -> int | None:
    """Lowest height whose stored values disagree with recomputation, or None if intact."""
    prev = None
    for h, block in enumerate(ledger.chain):
        hdr = block.header
        if hdr.height != h or block.hash != block_hash(hdr):
            return h
        if hdr.merkle_root != _block_merkle(block.transactions):
            return h
        expected_prev = ZERO_HASH if prev is None else prev.hash
        if hdr.prev_hash != expected_prev:
            return h
        prev = block
    return None


def dump_ledger(ledger: Ledger) -> str:
    """One tab-separated line per block: height, hash, prev, merkle, time, tx count, ids."""
    lines = []
    for block in ledger.chain:
        hdr = block.header
        ids = ",".join(tx.id for tx in block.transactions) or "-"
        lines.append(
            "\t".join(
                [
                    str(hdr.height),
                    block.hash.hex(),
                    hdr.prev_hash.hex(),
                    hdr.merkle_root.hex(),
                    str(hdr.timestamp),
                    str(len(block.transactions)),
                    ids,
                ]
            )
        )
    return "\n".join(lines) + "\n"


# -- bit-level tampering ------------------------------------------------------

_HEADER_FIELDS = (("height", 64), ("prev_hash", 256), ("merkle_root", 256), ("timestamp", 64))
_HASH_BITS = 256


def _tx_fields(tx: Transaction) -> list[tuple[str, object, int]]:
    fields = [("payload", None, len(tx.payload_ciphertext) * 8), ("timestamp", None, 64)]
    fields += [("tag", v, tx.tags[v].length) for v in sorted(tx.tags)]
    return fields


def tamperable_bits(block: Block) -> int:
    """Number of stored bits :func:`flip_bit` can address in ``block``."""
    total = sum(w for _, w in _HEADER_FIELDS) + _HASH_BITS
    for tx in block.transactions:
        total += sum(w for _, _, w in _tx_fields(tx))
    return total


def _flip_bytes(data: bytes, pos: int) -> bytes:
    buf = bytearray(data)
    buf[pos // 8] ^= 0x80 >> (pos % 8)
    return bytes(buf)


def _flip_int(value: int, width: int, pos: int) -> int:
    return value ^ (1 << (width - 1 - pos))


def flip_bit(block: Block, position: int) -> Block:
    """Return ``block`` with one stored bit inverted.

    Bits are numbered across the header fields first, then the stored block
    hash, then each transaction's payload, timestamp and tag values.
    """
    if not 0 <= position < tamperable_bits(block):
        raise InvalidInput(f"bit position {position} out of range")
    hdr = block.header
    for name, width in _HEADER_FIELDS:
        if position < width:
            value = getattr(hdr, name)
            if isinstance(value, bytes):
                new = _flip_bytes(value, position)
            else:
                new = _flip_int(value, width, position)
            return replace(block, header=replace(hdr, **{name: new}))
        position -= width
    if position < _HASH_BITS:
        return replace(block, hash=_flip_bytes(block.hash, position))
    position -= _HASH_BITS
    txs = list(block.transactions)
    for i, tx in enumerate(txs):
        for name, verifier, width in _tx_fields(tx):
            if position < width:
                if name == "payload":
                    tx = replace(tx, payload_ciphertext=_flip_bytes(tx.payload_ciphertext, position))
                elif name == "timestamp":
                    tx = replace(tx, timestamp=_flip_int(tx.timestamp, 64, position))
                else:
                    tag = tx.tags[verifier]
                    tags = dict(tx.tags)
                    tags[verifier] = Tag(tag.offset, tag.length, _flip_int(tag.value, tag.length, position))
                    tx = replace(tx, tags=tags)
                txs[i] = tx
                return replace(block, transactions=tuple(txs))
            position -= width
    raise AssertionError("unreachable")


def tamper_ledger(ledger: Ledger, height: int, position: int) -> None:
    if not 0 <= height < len(ledger.chain):
        raise InvalidInput(f"height {height} not on ledger of {ledger.owner}")
    ledger.chain[height] = flip_bit(ledger.chain[height], position)
