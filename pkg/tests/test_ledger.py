from __future__ import annotations

import threading

import numpy as np
import pytest

from fedrec import ledger as L
from fedrec.federation import SharedParams, extract_shared
from fedrec.neumf import Hyperparams, init_params


def make_chain(n: int, store: L.PayloadStore | None = None) -> L.Chain:
    led = L.Ledger(store or L.PayloadStore(), L.LogicalClock())
    for k in range(n):
        led.record(L.PayloadType(k % 4), k % 3, k // 4, f"payload-{k}".encode())
    return led.chain


class TestAppend:
    def test_genesis(self):
        c = L.Chain()
        b = L.append_block(c, "global-model", -1, 0, b"x")
        assert b.index == 0 and b.prev_hash == bytes(32) and len(c) == 1

    def test_identical_payloads(self):
        c = L.Chain()
        a = L.append_block(c, "payment", 1, 0, b"same", L.LogicalClock())
        b = L.append_block(c, "payment", 1, 0, b"same", L.LogicalClock())
        assert a.payload_digest == b.payload_digest and a.block_hash != b.block_hash
        assert b.prev_hash == a.block_hash

    def test_index_after_k(self):
        c = make_chain(5)
        assert L.append_block(c, 0, 0, 0, b"").index == 5

    def test_header_layout(self):
        c = L.Chain()
        b = L.append_block(c, L.PayloadType.AUCTION_RESULT, -1, -1, b"abc", lambda: 42)
        raw = b.encode()
        assert len(raw) == L.BLOCK_SIZE == 129
        assert raw[:8] == (0).to_bytes(8, "little") and raw[8:16] == (42).to_bytes(8, "little")
        assert raw[48] == 2 and raw[49:57] == (-1).to_bytes(8, "little", signed=True)
        assert raw[65:97] == L.sha256(b"abc") and raw[97:] == L.sha256(raw[:97])

    def test_unknown_type_name(self):
        with pytest.raises(KeyError):
            L.append_block(L.Chain(), "gossip", 0, 0, b"")

    def test_concurrent_appends_stay_linked(self):
        c = L.Chain()

        def worker(k):
            for j in range(25):
                L.append_block(c, "local-update", k, j, bytes([k, j]))

        threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(c) == 100 and L.verify_chain(c) is None


class TestVerify:
    def test_clean(self):
        assert L.verify_chain(make_chain(10)) is None
        assert L.verify_chain([]) is None

    def test_flip_payload_digest_bit(self):
        blocks = list(make_chain(10))
        b = blocks[4]
        bad = bytearray(b.payload_digest)
        bad[0] ^= 1
        blocks[4] = L.replace(b, payload_digest=bytes(bad))
        assert L.verify_chain(blocks) == L.Violation(4, "hash-mismatch")

    def test_delete_block(self):
        blocks = list(make_chain(10))
        del blocks[3]
        assert L.verify_chain(blocks) == L.Violation(3, "link-mismatch")

    def test_rehashed_forgery_breaks_next_link(self):
        blocks = list(make_chain(6))
        forged = L.replace(blocks[2], actor_id=77)
        blocks[2] = L.replace(forged, block_hash=forged.compute_hash())
        assert L.verify_chain(blocks) == L.Violation(3, "link-mismatch")

    def test_unknown_payload_type(self):
        c = L.Chain()
        draft = L.EvidenceBlock(0, 0, bytes(32), 9, 0, 0, bytes(32), b"")
        c._blocks.append(L.replace(draft, block_hash=draft.compute_hash()))
        assert L.verify_chain(c).reason == "unknown-payload-type"

    def test_payload_store_checks(self, tmp_path):
        store = L.PayloadStore(tmp_path)
        chain = make_chain(5, store)
        assert L.verify_chain(chain, store) is None
        target = tmp_path / chain[2].payload_digest.hex()
        target.write_bytes(target.read_bytes() + b"!")
        assert L.verify_chain(chain, store) == L.Violation(2, "payload-mismatch")
        target.unlink()
        assert L.verify_chain(chain, store) == L.Violation(2, "payload-missing")

    def test_every_single_bit_flip_detected(self):
        raw = bytearray(make_chain(4).to_bytes())
        for bit in range(len(raw) * 8):
            mutated = bytearray(raw)
            mutated[bit // 8] ^= 1 << (bit % 8)
            problem = L.verify_bytes(bytes(mutated))
            assert problem is not None
            assert problem.index <= (bit // 8) // (L.BLOCK_SIZE + 4)


class TestPersistence:
    def test_save_load(self, tmp_path):
        c = make_chain(7)
        c.save(tmp_path / "chain.bin")
        back = L.load_chain(tmp_path / "chain.bin")
        assert back.snapshot() == c.snapshot()

    def test_empty_file(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"")
        assert len(L.load_chain(tmp_path / "c.bin")) == 0

    def test_truncated(self):
        raw = make_chain(3).to_bytes()
        assert L.verify_bytes(raw[:-1]) == L.Violation(2, "bad-record-length")
        assert L.verify_bytes(raw + b"\x01") == L.Violation(3, "truncated-record")

    def test_snapshot_is_prefix(self):
        c = make_chain(3)
        snap = c.snapshot()
        L.append_block(c, 0, 0, 0, b"")
        assert len(snap) == 3 and c.snapshot()[:3] == snap


class TestRetrieve:
    def test_filters(self):
        c = make_chain(12)
        assert len(L.retrieve(c)) == 12
        assert [b.index for b in L.retrieve(c, "auction-result")] == [2, 6, 10]
        assert L.retrieve(c, actor_id=99) == []
        assert all(b.round == 1 and b.actor_id == 1 for b in L.retrieve(c, round=1, actor_id=1))


class TestHashParams:
    def _shared(self) -> SharedParams:
        return extract_shared(init_params(4, 5, Hyperparams(factors=3, mlp_layers=(4,)), seed=0))

    def test_deterministic(self):
        assert L.hash_params(self._shared()) == L.hash_params(self._shared())
        assert len(L.hash_params(self._shared())) == 32

    def test_one_ulp(self):
        sp = self._shared()
        before = L.hash_params(sp)
        sp.mlp_weights[0][0, 0] = np.nextafter(sp.mlp_weights[0][0, 0], np.inf)
        assert L.hash_params(sp) != before


def test_clock_modes(monkeypatch):
    monkeypatch.setenv("FEDREC_LOGICAL_CLOCK", "1")
    clock = L.default_clock()
    assert [clock(), clock(), clock()] == [0, 1, 2]
    monkeypatch.delenv("FEDREC_LOGICAL_CLOCK")
    assert L.default_clock() is L.wall_clock


def test_payload_type_labels():
    assert L.PayloadType.parse("local-update") is L.PayloadType.LOCAL_UPDATE
    assert L.PayloadType.PAYMENT.label == "payment"
