"""The augmented training state as a value: snapshots, policies, queue, checksums."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from memhist.model import ModelSpec, NormLayer, NormState, ParamVector, Segment, recalibrated_norm
from memhist.optim import AdamW, AveragingState, EmaState, OptimizerState, Schedule, SgdMomentum, SwaState, reset_optimizer
from memhist.rng import RngManifest
from memhist.sampler import EMPTY_SHA256, SamplerPolicy, SamplerState

SNAPSHOT_MAGIC = b"MEMH-SS1"
SNAPSHOT_VERSION = 1
SECTIONS = ("meta", "params", "optimizer", "ema", "swa", "teacher", "bn", "sampler", "queue", "schedule", "manifest")
POLICY_COMPONENTS = ("optimizer", "ema", "swa", "teacher", "bn", "queue")


class QueueFrozenError(RuntimeError):
    """Enqueue attempted while the queue is held frozen."""


class SnapshotFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# external FIFO queue
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QueueState:
    capacity: int
    entries: tuple[tuple[int, np.ndarray], ...] = ()  # (insertion step, vector), oldest first
    frozen: bool = False
    thaw_at: int | None = None

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("queue capacity must be positive")
        if len(self.entries) > self.capacity:
            raise ValueError("queue holds more entries than its capacity")

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([vec for _, vec in self.entries])

    def tags(self) -> list[int]:
        return [tag for tag, _ in self.entries]


def queue_step(q: QueueState, embeddings, step: int = 0) -> QueueState:
    """Enqueue a batch (FIFO eviction past capacity)."""
    if q.frozen:
        raise QueueFrozenError("enqueue on a frozen queue")
    new = [(step, np.array(row, dtype=np.float64)) for row in np.asarray(embeddings)]
    entries = (q.entries + tuple(new))[-q.capacity:]
    return replace(q, entries=entries)


def queue_fingerprint(q: QueueState | None) -> str:
    if q is None:
        return EMPTY_SHA256
    h = hashlib.sha256()
    for _, vec in q.entries:
        h.update(np.asarray(vec, dtype=">f8").tobytes())
    return h.hexdigest()


def clear_queue(q: QueueState) -> QueueState:
    return QueueState(q.capacity, (), q.frozen, q.thaw_at)


def freeze_queue(q: QueueState, until: int | None) -> QueueState:
    return replace(q, frozen=True, thaw_at=until)


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

ACTIONS = ("carry", "reset", "rewarm")


@dataclass(frozen=True)
class StatePolicy:
    optimizer: str = "carry"
    ema: str = "carry"
    swa: str = "carry"
    teacher: str = "carry"
    bn: str = "carry"
    queue: str = "carry"
    rewarm_K: int = 0
    name: str = ""

    def __post_init__(self):
        for comp in POLICY_COMPONENTS:
            action = getattr(self, comp)
            if action not in ACTIONS:
                raise ValueError(f"{comp}: unknown action {action!r}")
            if action == "rewarm" and comp != "optimizer":
                raise ValueError(f"{comp}: rewarm is only valid for the optimizer")
        if self.optimizer == "rewarm" and self.rewarm_K < 1:
            raise ValueError("rewarm needs K >= 1")

    @classmethod
    def preset(cls, name: str, K: int = 0) -> "StatePolicy":
        """carry: keep everything; reset: zero optimizer and reinit averages/BN; rewarm: reset + K-step warmup."""
        if name == "carry":
            return cls(name="carry")
        if name == "reset":
            return cls("reset", "reset", "reset", "reset", "reset", "carry", name="reset")
        if name == "rewarm":
            return cls("rewarm", "reset", "reset", "reset", "reset", "carry", rewarm_K=K, name="rewarm")
        raise ValueError(f"unknown policy preset {name!r}")

    @classmethod
    def from_mapping(cls, mapping: dict, name: str = "") -> "StatePolicy":
        kw, K = {}, 0
        for comp, action in mapping.items():
            if comp not in POLICY_COMPONENTS:
                raise ValueError(f"unknown policy component {comp!r}")
            if isinstance(action, dict):
                (key, K), = action.items()
                action = key
            kw[comp] = action
        return cls(**kw, rewarm_K=int(K), name=name)

    def touched(self) -> set[str]:
        out = {c for c in POLICY_COMPONENTS if getattr(self, c) != "carry"}
        if self.optimizer == "rewarm":
            out.add("schedule")
        return out


# --------------------------------------------------------------------------
# snapshot
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Snapshot:
    step: int
    params: ParamVector
    opt: OptimizerState
    avg: AveragingState
    norm: NormState
    sampler: SamplerState
    queue: QueueState | None
    manifest: RngManifest
    schedule: Schedule

    @classmethod
    def capture(cls, step, params, opt, avg, norm, sampler, queue, manifest, schedule) -> "Snapshot":
        """Deep copies of the mutable parts, keeping the sampler linked to its manifest stream."""
        manifest = manifest.copy()
        sampler = sampler.copy(stream=manifest.streams[sampler.stream.name])
        return cls(step, params, opt, avg, norm, sampler, queue, manifest, schedule)

    @property
    def schedule_pos(self) -> int:
        return self.step

    def to_bytes(self) -> bytes:
        return serialize(self)

    def digests(self) -> dict[str, str]:
        return {name: hashlib.sha256(payload).hexdigest() for name, payload in _sections(self)}


def apply_policy(s: Snapshot, p: StatePolicy) -> Snapshot:
    changes = {}
    if p.optimizer in ("reset", "rewarm"):
        changes["opt"] = reset_optimizer(s.opt)
    if p.optimizer == "rewarm":
        changes["schedule"] = s.schedule.with_rewarm(s.step, p.rewarm_K)
    avg = s.avg
    if p.ema == "reset" and avg.ema is not None:
        avg = replace(avg, ema=EmaState(s.params, avg.ema.alpha))
    if p.swa == "reset" and avg.swa is not None:
        avg = replace(avg, swa=SwaState(avg.swa.sum.zeros_like(), 0, avg.swa.start))
    if p.teacher == "reset" and avg.teacher is not None:
        avg = replace(avg, teacher=EmaState(s.params, avg.teacher.alpha))
    if avg is not s.avg:
        changes["avg"] = avg
    if p.bn == "reset" and s.norm.layers:
        changes["norm"] = NormState(
            tuple(NormLayer(np.zeros_like(l.running_mean), np.ones_like(l.running_var)) for l in s.norm.layers), s.norm.rho
        )
    if p.queue == "reset" and s.queue is not None:
        changes["queue"] = clear_queue(s.queue)
    return replace(s, **changes) if changes else s


def bn_recalibrate(spec: ModelSpec, params: ParamVector, norm: NormState, calib) -> NormState:
    """Exact per-feature mean/variance of each norm layer's inputs over ``calib`` (one pass)."""
    x = getattr(calib, "inputs", calib)
    if len(x) == 0:
        raise ValueError("empty calibration slice")
    return recalibrated_norm(spec, params, norm, x)


# --------------------------------------------------------------------------
# binary encoding
# --------------------------------------------------------------------------


class _W:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, x): self.parts.append(struct.pack("<B", x))
    def u32(self, x): self.parts.append(struct.pack("<I", x))
    def u64(self, x): self.parts.append(struct.pack("<Q", x))
    def i64(self, x): self.parts.append(struct.pack("<q", -1 if x is None else x))
    def f64(self, x): self.parts.append(struct.pack("<d", x))

    def s(self, text: str):
        raw = text.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def arr(self, a, dtype="<f8"):
        a = np.asarray(a).reshape(-1)
        self.u64(len(a))
        self.parts.append(a.astype(dtype).tobytes())

    def opt_arr(self, a, dtype="<f8"):
        self.u8(a is not None)
        if a is not None:
            self.arr(a, dtype)

    def pv(self, p: ParamVector):
        self.u32(len(p.layout))
        for seg in p.layout:
            self.s(seg.name)
            self.u32(len(seg.shape))
            for d in seg.shape:
                self.u32(d)
        self.arr(p.values)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _R:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def _take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise SnapshotFormatError("truncated section")
        (v,) = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return v

    def u8(self): return self._take("<B")
    def u32(self): return self._take("<I")
    def u64(self): return self._take("<Q")
    def f64(self): return self._take("<d")

    def i64(self):
        v = self._take("<q")
        return None if v == -1 else v

    def s(self) -> str:
        size = self.u32()
        raw = self.buf[self.pos:self.pos + size]
        if len(raw) != size:
            raise SnapshotFormatError("truncated string")
        self.pos += size
        return raw.decode("utf-8")

    def arr(self, dtype="<f8", out=np.float64):
        count = self.u64()
        width = np.dtype(dtype).itemsize
        if self.pos + count * width > len(self.buf):
            raise SnapshotFormatError("truncated array")
        a = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos).astype(out)
        self.pos += count * width
        return a

    def opt_arr(self, dtype="<f8", out=np.float64):
        return self.arr(dtype, out) if self.u8() else None

    def pv(self) -> ParamVector:
        nseg = self.u32()
        layout, pos = [], 0
        for _ in range(nseg):
            name = self.s()
            shape = tuple(self.u32() for _ in range(self.u32()))
            seg = Segment(name, pos, shape)
            layout.append(seg)
            pos += seg.size
        return ParamVector(self.arr(), tuple(layout))

    def done(self):
        if self.pos != len(self.buf):
            raise SnapshotFormatError("trailing bytes in section")


def _enc_opt(w: _W, opt: OptimizerState):
    w.s(opt.kind)
    if isinstance(opt, SgdMomentum):
        w.f64(opt.beta)
    else:
        for c in (opt.beta1, opt.beta2, opt.eps, opt.weight_decay):
            w.f64(c)
    w.u64(opt.step_count)
    for name, buf in opt.buffers().items():
        w.s(name)
        w.pv(buf)


def _dec_opt(r: _R) -> OptimizerState:
    kind = r.s()
    if kind == "sgd":
        beta = r.f64()
        count = r.u64()
        r.s()
        return SgdMomentum(r.pv(), beta, count)
    if kind == "adamw":
        b1, b2, eps, wd = r.f64(), r.f64(), r.f64(), r.f64()
        count = r.u64()
        r.s()
        m = r.pv()
        r.s()
        return AdamW(m, r.pv(), b1, b2, eps, wd, count)
    raise SnapshotFormatError(f"unknown optimizer kind {kind!r}")


def _enc_ema(w: _W, ema: EmaState | None):
    w.u8(ema is not None)
    if ema is None:
        return
    w.f64(ema.alpha)
    w.u8(ema.frozen)
    w.i64(ema.thaw_at)
    w.u8(ema.restore_alpha is not None)
    w.f64(ema.restore_alpha or 0.0)
    w.pv(ema.weights)


def _dec_ema(r: _R) -> EmaState | None:
    if not r.u8():
        return None
    alpha, frozen, thaw = r.f64(), bool(r.u8()), r.i64()
    has_restore, restore = r.u8(), r.f64()
    return EmaState(r.pv(), alpha, frozen, thaw, restore if has_restore else None)


def _enc_swa(w: _W, swa: SwaState | None):
    w.u8(swa is not None)
    if swa is None:
        return
    w.u64(swa.count)
    w.u64(swa.start)
    w.u8(swa.frozen)
    w.i64(swa.thaw_at)
    w.pv(swa.sum)


def _dec_swa(r: _R) -> SwaState | None:
    if not r.u8():
        return None
    count, start, frozen, thaw = r.u64(), r.u64(), bool(r.u8()), r.i64()
    return SwaState(r.pv(), count, start, frozen, thaw)


def _enc_norm(w: _W, norm: NormState):
    w.f64(norm.rho)
    w.u32(len(norm.layers))
    for layer in norm.layers:
        w.arr(layer.running_mean)
        w.arr(layer.running_var)


def _dec_norm(r: _R) -> NormState:
    rho = r.f64()
    return NormState(tuple(NormLayer(r.arr(), r.arr()) for _ in range(r.u32())), rho)


def _enc_sampler(w: _W, s: SamplerState):
    p = s.policy
    w.s(p.kind)
    w.u32(p.batch_size)
    w.u32(p.renormalize_every)
    w.opt_arr(p.priorities)
    for x in (s.n, s.epoch, s.cursor, s.drawn):
        w.u64(x)
    w.opt_arr(s.permutation, "<i8")
    w.opt_arr(s.probs)
    w.opt_arr(s.staged_priorities)
    w.s(s.stream.name)
    w.u32(len(s.pending))
    for ids, aug in s.pending:
        w.arr(ids, "<i8")
        w.arr(aug, "<u8")


def _dec_sampler(r: _R, manifest: RngManifest) -> SamplerState:
    kind, B, renorm = r.s(), r.u32(), r.u32()
    policy = SamplerPolicy(kind, B, r.opt_arr(), renorm)
    n, epoch, cursor, drawn = r.u64(), r.u64(), r.u64(), r.u64()
    perm = r.opt_arr("<i8", np.int64)
    probs = r.opt_arr()
    staged = r.opt_arr()
    name = r.s()
    if name not in manifest.streams:
        raise SnapshotFormatError(f"sampler stream {name!r} missing from manifest")
    pending = [(r.arr("<i8", np.int64), r.arr("<u8", np.uint64)) for _ in range(r.u32())]
    return SamplerState(policy, n, manifest.streams[name], epoch, cursor, perm, drawn, probs, staged, pending)


def _enc_queue(w: _W, q: QueueState | None):
    w.u8(q is not None)
    if q is None:
        return
    w.u32(q.capacity)
    w.u8(q.frozen)
    w.i64(q.thaw_at)
    w.u32(len(q.entries))
    for tag, vec in q.entries:
        w.i64(tag)
        w.arr(vec)


def _dec_queue(r: _R) -> QueueState | None:
    if not r.u8():
        return None
    K, frozen, thaw = r.u32(), bool(r.u8()), r.i64()
    entries = tuple((r.i64(), r.arr()) for _ in range(r.u32()))
    return QueueState(K, entries, frozen, thaw)


def _enc_schedule(w: _W, sch: Schedule):
    w.f64(sch.base_lr)
    w.u64(sch.warmup_steps)
    w.s(sch.kind)
    w.i64(sch.total_steps)
    w.i64(sch.rewarm_at)
    w.u64(sch.rewarm_steps)


def _dec_schedule(r: _R) -> Schedule:
    base, warm, kind, total, rewarm_at, rewarm_steps = r.f64(), r.u64(), r.s(), r.i64(), r.i64(), r.u64()
    return Schedule(base, warm, kind, total, rewarm_at, rewarm_steps)


def _sections(s: Snapshot) -> list[tuple[str, bytes]]:
    out = []
    encoders = {
        "meta": lambda w: w.u64(s.step),
        "params": lambda w: w.pv(s.params),
        "optimizer": lambda w: _enc_opt(w, s.opt),
        "ema": lambda w: _enc_ema(w, s.avg.ema),
        "swa": lambda w: _enc_swa(w, s.avg.swa),
        "teacher": lambda w: _enc_ema(w, s.avg.teacher),
        "bn": lambda w: _enc_norm(w, s.norm),
        "sampler": lambda w: _enc_sampler(w, s.sampler),
        "queue": lambda w: _enc_queue(w, s.queue),
        "schedule": lambda w: _enc_schedule(w, s.schedule),
    }
    for name in SECTIONS:
        if name == "manifest":
            out.append((name, s.manifest.to_text().encode("utf-8")))
            continue
        w = _W()
        encoders[name](w)
        out.append((name, w.bytes()))
    return out


def serialize(s: Snapshot) -> bytes:
    """Header, then per section: name, u64 length, payload, SHA-256(payload);
    the file ends with SHA-256 of everything before it."""
    parts = [SNAPSHOT_MAGIC, struct.pack("<II", SNAPSHOT_VERSION, len(SECTIONS))]
    for name, payload in _sections(s):
        raw = name.encode("ascii")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", len(payload)), payload,
                  hashlib.sha256(payload).digest()]
    blob = b"".join(parts)
    return blob + hashlib.sha256(blob).digest()


def read_sections(buf: bytes, verify: bool = True) -> dict[str, bytes]:
    """Split a snapshot file into its section payloads, checking every digest."""
    if buf[:8] != SNAPSHOT_MAGIC:
        raise SnapshotFormatError("bad snapshot magic")
    if len(buf) < 16 + 32:
        raise SnapshotFormatError("snapshot truncated")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"snapshot version {version} != {SNAPSHOT_VERSION}")
    if verify and hashlib.sha256(buf[:-32]).digest() != buf[-32:]:
        raise SnapshotFormatError("file checksum mismatch")
    pos, end = 16, len(buf) - 32
    out = {}
    for _ in range(count):
        if pos + 2 > end:
            raise SnapshotFormatError("snapshot truncated")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + nlen].decode("ascii", errors="replace")
        pos += 2 + nlen
        if pos + 8 > end:
            raise SnapshotFormatError("snapshot truncated")
        (plen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pos + plen + 32 > end:
            raise SnapshotFormatError(f"section {name!r} overruns the file")
        payload = buf[pos:pos + plen]
        digest = buf[pos + plen:pos + plen + 32]
        pos += plen + 32
        if verify and hashlib.sha256(payload).digest() != digest:
            raise SnapshotFormatError(f"section {name!r} digest mismatch")
        out[name] = payload
    if pos != end:
        raise SnapshotFormatError("trailing bytes after sections")
    if tuple(out) != SECTIONS:
        raise SnapshotFormatError(f"unexpected sections {tuple(out)}")
    return out


def deserialize(buf: bytes, verify: bool = True) -> Snapshot:
    sec = read_sections(buf, verify)
    try:
        manifest = RngManifest.from_text(sec["manifest"].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise SnapshotFormatError(f"manifest section: {exc}") from exc
    readers = {name: _R(payload) for name, payload in sec.items() if name != "manifest"}
    step = readers["meta"].u64()
    params = readers["params"].pv()
    opt = _dec_opt(readers["optimizer"])
    avg = AveragingState(_dec_ema(readers["ema"]), _dec_swa(readers["swa"]), _dec_ema(readers["teacher"]))
    norm = _dec_norm(readers["bn"])
    sampler = _dec_sampler(readers["sampler"], manifest)
    queue = _dec_queue(readers["queue"])
    schedule = _dec_schedule(readers["schedule"])
    for r in readers.values():
        r.done()
    return Snapshot(step, params, opt, avg, norm, sampler, queue, manifest, schedule)


def section_digests(buf: bytes) -> dict[str, str]:
    return {name: hashlib.sha256(p).hexdigest() for name, p in read_sections(buf).items()}


# --------------------------------------------------------------------------
# checksums
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentChecksum:
    component: str
    norms: dict
    digest: str


def _l2(a) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    return float(np.sqrt(np.dot(a, a)))


def component_checksum(s: Snapshot, component: str) -> ComponentChecksum:
    """L2 norms of a component's vectors plus SHA-256 of its serialized section."""
    if component not in SECTIONS:
        raise KeyError(f"unknown component {component!r}")
    norms: dict[str, float] = {}
    if component == "params":
        norms["theta"] = s.params.norm()
    elif component == "optimizer":
        norms = {name: buf.norm() for name, buf in s.opt.buffers().items()}
    elif component in ("ema", "teacher"):
        ema = getattr(s.avg, component)
        if ema is not None:
            norms["weights"] = ema.weights.norm()
    elif component == "swa" and s.avg.swa is not None:
        norms["sum"] = s.avg.swa.sum.norm()
    elif component == "bn":
        for i, layer in enumerate(s.norm.layers):
            norms[f"l{i}.mean"] = _l2(layer.running_mean)
            norms[f"l{i}.var"] = _l2(layer.running_var)
    elif component == "queue" and s.queue is not None:
        norms["entries"] = _l2(s.queue.matrix())
    return ComponentChecksum(component, norms, s.digests()[component])


def diff_components(a: Snapshot | bytes, b: Snapshot | bytes) -> set[str]:
    da = a.digests() if isinstance(a, Snapshot) else section_digests(a)
    db = b.digests() if isinstance(b, Snapshot) else section_digests(b)
    return {name for name in SECTIONS if da[name] != db[name]}
