"""Append-only SHA-256 hash chain for protocol evidence.

Blocks carry digests only; full payloads live in a content-addressed
store keyed by the hex digest. Header layout (little-endian)::

    index u64 | timestamp i64 | prev_hash 32B | payload_type u8 |
    actor_id i64 | round i64 | payload_digest 32B

``block_hash = sha256(header)``. On disk a chain is a sequence of
``u32 length`` + ``header + block_hash`` records.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

GENESIS_PREV = bytes(32)
SERVER_ACTOR = -1

_HEADER = struct.Struct("<Qq32sBqq32s")
_LEN = struct.Struct("<I")
BLOCK_SIZE = _HEADER.size + 32


class PayloadType(enum.IntEnum):
    LOCAL_UPDATE = 0
    GLOBAL_MODEL = 1
    AUCTION_RESULT = 2
    PAYMENT = 3

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    @classmethod
    def parse(cls, value: str | int | PayloadType) -> PayloadType:
        if isinstance(value, str):
            return cls[value.upper().replace("-", "_")]
        return cls(value)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class EvidenceBlock:
    index: int
    timestamp: int
    prev_hash: bytes
    payload_type: int
    actor_id: int
    round: int
    payload_digest: bytes
    block_hash: bytes

    def header_bytes(self) -> bytes:
        return _HEADER.pack(
            self.index,
            self.timestamp,
            self.prev_hash,
            self.payload_type,
            self.actor_id,
            self.round,
            self.payload_digest,
        )

    def compute_hash(self) -> bytes:
        return sha256(self.header_bytes())

    def encode(self) -> bytes:
        return self.header_bytes() + self.block_hash

    @classmethod
    def decode(cls, raw: bytes) -> EvidenceBlock:
        if len(raw) != BLOCK_SIZE:
            raise ValueError(f"block record is {len(raw)} bytes, expected {BLOCK_SIZE}")
        fields = _HEADER.unpack(raw[: _HEADER.size])
        return cls(*fields, block_hash=raw[_HEADER.size :])

    @property
    def type_label(self) -> str:
        try:
            return PayloadType(self.payload_type).label
        except ValueError:
            return f"unknown({self.payload_type})"


@dataclass(frozen=True)
class Violation:
    index: int
    reason: str

    def __str__(self) -> str:
        return f"block {self.index}: {self.reason}"


class LogicalClock:
    """Monotone counter used in place of wall-clock time for reproducible chains."""

    def __init__(self, start: int = 0) -> None:
        self._next = start

    def __call__(self) -> int:
        value = self._next
        self._next += 1
        return value


def wall_clock() -> int:
    return int(time.time())


def default_clock():
    if os.environ.get("FEDREC_LOGICAL_CLOCK") == "1":
        return LogicalClock()
    return wall_clock


class Chain:
    """Ordered, append-only list of evidence blocks.

    Appends are serialised by a lock; :meth:`snapshot` hands readers an
    immutable prefix.
    """

    def __init__(self, blocks: list[EvidenceBlock] | None = None) -> None:
        self._blocks: list[EvidenceBlock] = list(blocks or [])
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self) -> Iterator[EvidenceBlock]:
        return iter(self.snapshot())

    def __getitem__(self, idx: int) -> EvidenceBlock:
        return self._blocks[idx]

    def snapshot(self) -> tuple[EvidenceBlock, ...]:
        return tuple(self._blocks)

    @property
    def head(self) -> bytes:
        return self._blocks[-1].block_hash if self._blocks else GENESIS_PREV

    def _append(self, make) -> EvidenceBlock:
        with self._lock:
            block = make(len(self._blocks), self.head)
            self._blocks.append(block)
            return block

    def to_bytes(self) -> bytes:
        return b"".join(_LEN.pack(BLOCK_SIZE) + b.encode() for b in self._blocks)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())


def append_block(
    chain: Chain,
    payload_type: PayloadType | str,
    actor_id: int,
    round: int,
    payload_bytes: bytes,
    clock=wall_clock,
) -> EvidenceBlock:
    ptype = PayloadType.parse(payload_type)
    digest = sha256(payload_bytes)

    def make(index: int, prev: bytes) -> EvidenceBlock:
        draft = EvidenceBlock(index, int(clock()), prev, int(ptype), actor_id, round, digest, b"")
        return replace(draft, block_hash=draft.compute_hash())

    return chain._append(make)


def verify_chain(blocks, store: PayloadStore | None = None) -> Violation | None:
    """First integrity violation, or ``None`` when every hash and link checks out.

    With a ``store`` the stored payload of every block is re-hashed too.
    """
    prev = GENESIS_PREV
    for pos, block in enumerate(blocks):
        if block.compute_hash() != block.block_hash:
            return Violation(pos, "hash-mismatch")
        if block.prev_hash != prev:
            return Violation(pos, "link-mismatch")
        if block.index != pos:
            return Violation(pos, "index-mismatch")
        if block.payload_type not in PayloadType._value2member_map_:
            return Violation(pos, "unknown-payload-type")
        if store is not None:
            data = store.get(block.payload_digest)
            if data is None:
                return Violation(pos, "payload-missing")
            if sha256(data) != block.payload_digest:
                return Violation(pos, "payload-mismatch")
        prev = block.block_hash
    return None


def decode_chain(raw: bytes) -> tuple[list[EvidenceBlock], Violation | None]:
    """Parse a serialised chain; a framing error is reported against the block it hits."""
    blocks: list[EvidenceBlock] = []
    pos = 0
    while pos < len(raw):
        idx = len(blocks)
        if pos + _LEN.size > len(raw):
            return blocks, Violation(idx, "truncated-record")
        (length,) = _LEN.unpack_from(raw, pos)
        pos += _LEN.size
        if length != BLOCK_SIZE or pos + length > len(raw):
            return blocks, Violation(idx, "bad-record-length")
        blocks.append(EvidenceBlock.decode(raw[pos : pos + length]))
        pos += length
    return blocks, None


def load_chain(path: str | Path) -> Chain:
    blocks, problem = decode_chain(Path(path).read_bytes())
    if problem is not None:
        raise ValueError(f"{path}: {problem}")
    return Chain(blocks)


def verify_bytes(raw: bytes, store: PayloadStore | None = None) -> Violation | None:
    blocks, problem = decode_chain(raw)
    found = verify_chain(blocks, store)
    if found is not None:
        return found
    return problem


def retrieve(
    chain,
    payload_type: PayloadType | str | None = None,
    actor_id: int | None = None,
    round: int | None = None,
) -> list[EvidenceBlock]:
    want = PayloadType.parse(payload_type) if payload_type is not None else None
    return [
        b
        for b in chain
        if (want is None or b.payload_type == want)
        and (actor_id is None or b.actor_id == actor_id)
        and (round is None or b.round == round)
    ]


class PayloadStore:
    """Content-addressed payload storage; in memory unless given a directory."""

    def __init__(self, root: str | Path | None = None) -> None:
        self.root = Path(root) if root is not None else None
        self._mem: dict[bytes, bytes] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def put(self, data: bytes) -> bytes:
        digest = sha256(data)
        if self.root is None:
            self._mem[digest] = bytes(data)
        else:
            target = self.root / digest.hex()
            if not target.exists():
                target.write_bytes(data)
        return digest

    def get(self, digest: bytes) -> bytes | None:
        if self.root is None:
            return self._mem.get(digest)
        target = self.root / digest.hex()
        return target.read_bytes() if target.exists() else None


class Ledger:
    """A chain, its payload store, and a clock bundled for protocol code."""

    def __init__(self, store: PayloadStore | None = None, clock=None, chain: Chain | None = None) -> None:
        self.chain = chain if chain is not None else Chain()
        self.store = store if store is not None else PayloadStore()
        self.clock = clock if clock is not None else default_clock()

    def record(self, payload_type: PayloadType | str, actor_id: int, round: int, payload: bytes) -> EvidenceBlock:
        self.store.put(payload)
        return append_block(self.chain, payload_type, actor_id, round, payload, self.clock)

    def verify(self) -> Violation | None:
        return verify_chain(self.chain, self.store)

    def payload(self, block: EvidenceBlock) -> bytes | None:
        return self.store.get(block.payload_digest)


def hash_params(shared) -> bytes:
    """SHA-256 of a parameter set's canonical little-endian serialisation."""
    return sha256(shared.to_bytes())
