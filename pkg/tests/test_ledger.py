import hashlib
from dataclasses import replace

import numpy as np
import pytest

from qsbnet.errors import AppendRejected, InvalidBlock, InvalidInput, TransactionFailed
from qsbnet.ledger import (
    ZERO_HASH,
    Block,
    BlockHeader,
    Ledger,
    Transaction,
    TxKind,
    Verdict,
    append_block,
    assemble_block,
    audit_chain,
    block_hash,
    decrypt_payload,
    dump_ledger,
    flip_bit,
    make_transaction,
    merkle_root,
    tamper_ledger,
    tamperable_bits,
    validate_transaction,
)
from qsbnet.qcrypto import KeyPools, Tag

# Frozen from a standalone struct/hashlib encoding of the same fixtures.
TWO_TX_ROOT = "2236b920a13472e0925a78fabc7121f07db10fa70d39becd161a10a615f3c6bf"
HEADER_DIGEST = "ffc351f7cb0c195025706f95048e17af5e5cdbcdef3162cf3a23d60208f2d2bc"


def fixed_txs():
    t1 = Transaction("tx-1", "n0", b"\xde\xad", 1000, {"n1": Tag(5, 32, 0x01020304)}, TxKind.LIGHTPATH_ESTABLISH)
    t2 = Transaction("tx-2", "n1", b"", 2000, {"n0": Tag(0, 32, 0xCAFEBABE)}, TxKind.LIGHTPATH_RELEASE)
    return t1, t2


def sha(data):
    return hashlib.sha256(data).digest()


def node_pools(nodes, bits=20_000, seed=0):
    rng = np.random.default_rng(seed)
    pools = KeyPools()
    for i, a in enumerate(nodes):
        for b in nodes[i + 1 :]:
            pools.ensure(a, b).deposit(rng.integers(0, 2, bits))
    return pools


def build_chain(n_blocks, seed=0):
    nodes = ["n0", "n1", "n2", "n3"]
    pools = node_pools(nodes, bits=200_000, seed=seed)
    rng = np.random.default_rng(seed)
    ledger = Ledger("n0")
    for h in range(1, n_blocks):
        txs = [
            make_transaction(bytes(rng.integers(0, 256, 8, dtype=np.uint8)), nodes[(h + k) % 4], nodes, pools,
                             h * 1000 + k, rng=rng)
            for k in range(1 + h % 3)
        ]
        verdicts = {tx.id: Verdict.ACCEPT for tx in txs}
        append_block(ledger, assemble_block(txs, ledger.tip, h * 1000, verdicts))
    return ledger


def test_merkle_single_tx_is_leaf():
    t1, _ = fixed_txs()
    assert merkle_root([t1]) == sha(b"\x00" + t1.to_bytes())


def test_merkle_two_tx_golden():
    t1, t2 = fixed_txs()
    root = merkle_root([t1, t2])
    assert root.hex() == TWO_TX_ROOT
    assert root == sha(b"\x01" + sha(b"\x00" + t1.to_bytes()) + sha(b"\x00" + t2.to_bytes()))


def test_merkle_three_tx_duplicates_last():
    t1, t2 = fixed_txs()
    t3 = replace(t1, id="tx-3")
    leaves = [sha(b"\x00" + t.to_bytes()) for t in (t1, t2, t3)]
    left = sha(b"\x01" + leaves[0] + leaves[1])
    right = sha(b"\x01" + leaves[2] + leaves[2])
    assert merkle_root([t1, t2, t3]) == sha(b"\x01" + left + right)
    flipped = replace(t3, payload_ciphertext=b"\xde\xac")
    assert merkle_root([t1, t2, flipped]) != merkle_root([t1, t2, t3])


def test_merkle_empty():
    with pytest.raises(InvalidInput):
        merkle_root([])


def test_block_hash_golden_and_determinism():
    hdr = BlockHeader(7, bytes(range(32)), bytes(range(32, 64)), 123456789)
    assert block_hash(hdr).hex() == HEADER_DIGEST
    assert block_hash(hdr) == block_hash(BlockHeader(7, bytes(range(32)), bytes(range(32, 64)), 123456789))
    assert block_hash(replace(hdr, height=8)) != block_hash(hdr)


def test_genesis_and_chaining():
    ledger = Ledger("n0")
    g = ledger.tip
    assert g.height == 0 and g.header.prev_hash == ZERO_HASH
    t1, _ = fixed_txs()
    b1 = assemble_block([t1], g, 10, {t1.id: Verdict.ACCEPT})
    assert b1.height == 1 and b1.header.prev_hash == block_hash(g.header)
    append_block(ledger, b1)
    assert len(ledger) == 2


def test_assemble_rejects_unvalidated():
    t1, t2 = fixed_txs()
    with pytest.raises(InvalidBlock):
        assemble_block([t1, t2], Ledger("x").tip, 5, {t1.id: Verdict.ACCEPT, t2.id: Verdict.REJECT})


def test_append_rejects_stale_and_duplicate():
    ledger = Ledger("n0")
    t1, t2 = fixed_txs()
    b1 = assemble_block([t1], ledger.tip, 10, {t1.id: Verdict.ACCEPT})
    append_block(ledger, b1)
    stale = assemble_block([t2], ledger.chain[0], 20, {t2.id: Verdict.ACCEPT})
    with pytest.raises(AppendRejected):
        append_block(ledger, stale)
    with pytest.raises(AppendRejected):
        append_block(ledger, b1)
    assert len(ledger) == 2


def test_append_leaves_prior_blocks_untouched():
    ledger = build_chain(5)
    before = [b.to_bytes() for b in ledger.chain]
    t1, _ = fixed_txs()
    append_block(ledger, assemble_block([t1], ledger.tip, 99_000, {t1.id: Verdict.ACCEPT}))
    assert [b.to_bytes() for b in ledger.chain[:-1]] == before


def test_make_transaction_roundtrip():
    nodes = ["a", "b", "c", "d"]
    pools = node_pools(nodes)
    tx = make_transaction(b"lightpath a->c", "a", nodes, pools, 42, rng=np.random.default_rng(0))
    assert set(tx.tags) == {"b", "c", "d"}
    assert validate_transaction(tx, ["b", "c", "d"], pools) is Verdict.ACCEPT
    for v in ("b", "c", "d"):
        assert decrypt_payload(tx, v, pools) == b"lightpath a->c"


def test_make_transaction_empty_payload():
    pools = node_pools(["a", "b"])
    tx = make_transaction(b"", "a", ["b"], pools, 0, rng=np.random.default_rng(0))
    assert tx.payload_ciphertext == b""
    assert validate_transaction(tx, ["b"], pools, 1) is Verdict.ACCEPT


def test_make_transaction_failure_restores_pools():
    pools = node_pools(["a", "b"], bits=2000)
    pools.ensure("a", "c").deposit(np.zeros(50, dtype=np.uint8))
    before = pools.snapshot()
    with pytest.raises(TransactionFailed):
        make_transaction(b"x" * 4, "a", ["b", "c"], pools, 0, rng=np.random.default_rng(0))
    assert pools.snapshot() == before


def test_tampered_payload_rejected():
    nodes = ["a", "b", "c", "d"]
    pools = node_pools(nodes)
    tx = make_transaction(b"payload", "a", nodes, pools, 1, rng=np.random.default_rng(0))
    bad = replace(tx, payload_ciphertext=bytes([tx.payload_ciphertext[0] ^ 1]) + tx.payload_ciphertext[1:])
    assert validate_transaction(bad, ["b", "c", "d"], pools) is Verdict.REJECT


def test_sybil_sender_rejected():
    pools = node_pools(["a", "b", "c"])
    rng = np.random.default_rng(5)
    tags = {v: Tag(int(rng.integers(0, 1000)), 32, int(rng.integers(0, 2**32))) for v in ("a", "b", "c")}
    tx = Transaction("sybil-0", "sybil", b"\x00", 0, tags)
    assert validate_transaction(tx, ["a", "b", "c"], pools) is Verdict.REJECT


def test_validate_quorum_bounds():
    t1, _ = fixed_txs()
    with pytest.raises(InvalidInput):
        validate_transaction(t1, ["n1"], KeyPools(), quorum=2)


def test_audit_intact_chain():
    assert audit_chain(build_chain(100)) is None


def test_audit_payload_flip_localized():
    ledger = build_chain(50)
    tamper_ledger(ledger, 37, 640 + 256 + 3)  # first tx payload, bit 3
    assert audit_chain(ledger) == 37


def test_audit_consistent_rewrite_detected_at_successor():
    ledger = build_chain(50)
    block = flip_bit(ledger.chain[37], 640 + 256 + 1)
    hdr = replace(block.header, merkle_root=merkle_root(block.transactions))
    ledger.chain[37] = Block.seal(hdr, block.transactions)
    assert audit_chain(ledger) == 38


def test_audit_random_flips():
    ledger = build_chain(40, seed=3)
    honest = ledger.replica_digest()
    rng = np.random.default_rng(0)
    for _ in range(200):
        h = int(rng.integers(0, 40))
        pos = int(rng.integers(0, tamperable_bits(ledger.chain[h])))
        original = ledger.chain[h]
        tamper_ledger(ledger, h, pos)
        found = audit_chain(ledger)
        assert found in (h, h + 1)
        assert ledger.replica_digest() != honest
        ledger.chain[h] = original
    assert audit_chain(ledger) is None


def test_dump_format():
    ledger = build_chain(3)
    lines = dump_ledger(ledger).splitlines()
    assert len(lines) == 3
    first = lines[0].split("\t")
    assert first[0] == "0" and first[2] == "00" * 32 and first[5] == "0" and first[6] == "-"
    second = lines[1].split("\t")
    assert second[2] == first[1]
    assert int(second[5]) == len(second[6].split(","))
