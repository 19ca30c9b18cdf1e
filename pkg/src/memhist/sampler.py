"""Data-order policies, window recording / permutation and order hashing."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from memhist.rng import RngStream

EMPTY_SHA256 = hashlib.sha256(b"").hexdigest()
POLICIES = ("rr", "wr", "prioritized")


@dataclass(frozen=True, eq=False)
class SamplerPolicy:
    kind: str
    batch_size: int
    priorities: np.ndarray | None = None
    renormalize_every: int = 1  # epochs

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown sampler policy {self.kind!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.kind == "prioritized":
            if self.priorities is None:
                raise ValueError("prioritized sampling needs priorities")
            p = np.array(self.priorities, dtype=np.float64, copy=True)
            check_priorities(p)
            p.flags.writeable = False
            object.__setattr__(self, "priorities", p)
        if self.renormalize_every < 1:
            raise ValueError("renormalize_every must be >= 1")


def check_priorities(p: np.ndarray):
    if not (np.all(np.isfinite(p)) and np.all(p > 0)):
        raise ValueError("priorities must be strictly positive and finite")


@dataclass(eq=False)
class SamplerState:
    """Single-owner, mutable. ``pending`` holds a recorded window to replay
    before the policy resumes: a list of (ids, aug_seeds) batches."""

    policy: SamplerPolicy
    n: int
    stream: RngStream
    epoch: int = 0
    cursor: int = 0
    permutation: np.ndarray | None = None
    drawn: int = 0  # examples drawn so far (WR / prioritized epochs)
    probs: np.ndarray | None = None
    staged_priorities: np.ndarray | None = None
    pending: list = field(default_factory=list)

    def __post_init__(self):
        if self.policy.batch_size > self.n:
            raise ValueError("batch_size exceeds dataset size")
        if self.policy.kind == "rr" and self.permutation is None:
            self.permutation = self.stream.permutation(np.arange(self.n))
        if self.policy.kind == "prioritized":
            if len(self.policy.priorities) != self.n:
                raise ValueError("one priority per example required")
            if self.probs is None:
                self.probs = normalized(self.policy.priorities)

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.n // self.policy.batch_size)

    def copy(self, stream: RngStream | None = None) -> "SamplerState":
        return SamplerState(
            self.policy, self.n, stream if stream is not None else self.stream.copy(), self.epoch, self.cursor,
            None if self.permutation is None else self.permutation.copy(), self.drawn,
            None if self.probs is None else self.probs.copy(),
            None if self.staged_priorities is None else self.staged_priorities.copy(),
            [(ids.copy(), aug.copy()) for ids, aug in self.pending],
        )

    def update_priorities(self, priorities):
        """Stage new priorities; they take effect at the next renormalization boundary."""
        p = np.asarray(priorities, dtype=np.float64)
        check_priorities(p)
        self.staged_priorities = p.copy()

    def _advance_epoch(self):
        self.epoch += 1
        if self.policy.kind == "prioritized" and self.staged_priorities is not None and self.epoch % self.policy.renormalize_every == 0:
            self.probs = normalized(self.staged_priorities)
            self.staged_priorities = None


def normalized(priorities: np.ndarray) -> np.ndarray:
    p = np.asarray(priorities, dtype=np.float64)
    return p / p.sum()


def next_batch(state: SamplerState) -> np.ndarray:
    """Next id batch under the policy. Mutates ``state``; ignores ``pending``."""
    B = state.policy.batch_size
    kind = state.policy.kind
    if kind == "rr":
        if state.cursor >= state.n:
            state.permutation = state.stream.permutation(np.arange(state.n))
            state.cursor = 0
            state._advance_epoch()
        ids = state.permutation[state.cursor:state.cursor + B].copy()
        state.cursor += len(ids)
        return ids
    if kind == "wr":
        ids = state.stream.integers(state.n, B)
    else:
        ids = state.stream.weighted_without_replacement(state.probs, B)
    before = state.drawn // state.n
    state.drawn += B
    for _ in range(state.drawn // state.n - before):
        state._advance_epoch()
    return ids


def next_step_batch(state: SamplerState, aug_stream: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """(ids, aug_seeds) for one training step: a pending replay batch if any."""
    if state.pending:
        return state.pending.pop(0)
    ids = next_batch(state)
    return ids, aug_stream.u64(len(ids))


@dataclass(frozen=True, eq=False)
class OrderRecord:
    t0: int
    batches: tuple[np.ndarray, ...]
    aug_seeds: np.ndarray  # one per example occurrence, concatenated batch order
    hash: str

    def __post_init__(self):
        batches = tuple(np.array(b, dtype=np.int64, copy=True) for b in self.batches)
        for b in batches:
            b.flags.writeable = False
        aug = np.array(self.aug_seeds, dtype=np.uint64, copy=True)
        aug.flags.writeable = False
        object.__setattr__(self, "batches", batches)
        object.__setattr__(self, "aug_seeds", aug)
        if sum(len(b) for b in batches) != len(aug):
            raise ValueError("one augmentation seed per example occurrence required")

    @property
    def W(self) -> int:
        return len(self.batches)

    def flat_ids(self) -> np.ndarray:
        return np.concatenate(self.batches) if self.batches else np.zeros(0, np.int64)

    def as_pending(self) -> list:
        out, pos = [], 0
        for b in self.batches:
            out.append((b.copy(), self.aug_seeds[pos:pos + len(b)].copy()))
            pos += len(b)
        return out

    def aug_hash(self) -> str:
        return hashlib.sha256(self.aug_seeds.astype(">u8").tobytes()).hexdigest()


def record_window(state: SamplerState, W: int, aug_stream: RngStream, t0: int = 0) -> OrderRecord:
    """Pre-draw the next W batches and their augmentation seeds.

    Leaves ``state`` positioned after the window; load the record into
    ``state.pending`` to replay it.
    """
    if W < 1:
        raise ValueError("W must be >= 1")
    batches, seeds = [], []
    for _ in range(W):
        ids, aug = next_step_batch(state, aug_stream)
        batches.append(ids)
        seeds.append(aug)
    return OrderRecord(t0, tuple(batches), np.concatenate(seeds), order_hash(batches))


def permute_window(record: OrderRecord, stream: RngStream, reuse_aug: bool = True) -> OrderRecord:
    """Same id multiset re-partitioned into the same batch sizes under a fresh shuffle.

    With ``reuse_aug`` each augmentation seed travels with its example
    occurrence; otherwise seeds stay in position order.
    """
    flat = record.flat_ids()
    perm = stream.permutation(np.arange(len(flat)))
    ids = flat[perm]
    aug = record.aug_seeds[perm] if reuse_aug else record.aug_seeds.copy()
    sizes = np.cumsum([len(b) for b in record.batches])[:-1]
    batches = np.split(ids, sizes)
    return OrderRecord(record.t0, tuple(batches), aug, order_hash(batches))


def _order_bytes(batches) -> bytes:
    parts = []
    for b in batches:
        b = np.asarray(b)
        if len(b) and (b.min() < 0):
            raise ValueError("ids must be non-negative")
        parts.append(struct.pack(">I", len(b)))
        parts.append(b.astype(">u8").tobytes())
    return b"".join(parts)


def order_hash(batches) -> str:
    """SHA-256 hex of: per batch, u32 BE length then u64 BE ids."""
    return hashlib.sha256(_order_bytes(batches)).hexdigest()


def importance_weights(ids, priorities, n: int) -> np.ndarray:
    """1 / (n * p_i) with p_i = priority_i / sum(priorities)."""
    pr = np.asarray(priorities, dtype=np.float64)
    if np.any(pr <= 0) or not np.all(np.isfinite(pr)):
        raise ValueError("priorities must be strictly positive")
    p = pr / pr.sum()
    return 1.0 / (n * p[np.asarray(ids, dtype=np.int64)])


# --------------------------------------------------------------------------
# OrderRecord file: MEMH-OR1
# --------------------------------------------------------------------------

_OR_MAGIC = b"MEMH-OR1"


def order_record_to_bytes(record: OrderRecord) -> bytes:
    body = [_OR_MAGIC, struct.pack(">QI", record.t0, record.W), _order_bytes(record.batches),
            struct.pack(">I", len(record.aug_seeds)), record.aug_seeds.astype(">u8").tobytes(),
            record.hash.encode("ascii"), record.aug_hash().encode("ascii")]
    blob = b"".join(body)
    return blob + hashlib.sha256(blob).digest()


class RecordIntegrityError(ValueError):
    pass


def order_record_from_bytes(buf: bytes, verify: bool = True) -> OrderRecord:
    """Parse an order file; with ``verify`` every digest is recomputed."""
    if buf[:8] != _OR_MAGIC:
        raise RecordIntegrityError("bad order-record magic")
    if len(buf) < 8 + 12 + 4 + 128 + 32:
        raise RecordIntegrityError("order record truncated")
    t0, W = struct.unpack_from(">QI", buf, 8)
    pos = 20
    batches = []
    for _ in range(W):
        if pos + 4 > len(buf):
            raise RecordIntegrityError("order record truncated")
        (size,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        if pos + 8 * size > len(buf):
            raise RecordIntegrityError("order record truncated")
        batches.append(np.frombuffer(buf, dtype=">u8", count=size, offset=pos).astype(np.int64))
        pos += 8 * size
    (count,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    if pos + 8 * count + 128 + 32 != len(buf):
        raise RecordIntegrityError("order record length mismatch")
    aug = np.frombuffer(buf, dtype=">u8", count=count, offset=pos).astype(np.uint64)
    pos += 8 * count
    stored = buf[pos:pos + 64].decode("ascii", errors="replace")
    stored_aug = buf[pos + 64:pos + 128].decode("ascii", errors="replace")
    if verify:
        if hashlib.sha256(buf[:-32]).digest() != buf[-32:]:
            raise RecordIntegrityError("file checksum mismatch")
        if order_hash(batches) != stored:
            raise RecordIntegrityError("order_hash mismatch")
    try:
        record = OrderRecord(t0, tuple(batches), aug, stored)
    except ValueError as exc:
        raise RecordIntegrityError(str(exc)) from exc
    if verify and record.aug_hash() != stored_aug:
        raise RecordIntegrityError("augmentation hash mismatch")
    return record
