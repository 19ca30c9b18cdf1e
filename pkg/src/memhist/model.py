"""Desk-scale models, synthetic data and hand-written backprop.

Everything here is float64 numpy with a fixed operation order so that a
trajectory is bitwise reproducible on one build.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from memhist.rng import RngStream

KINDS = ("linear", "logistic", "mlp", "embedder")
TASKS = ("classify", "regress", "contrastive", "teacher_consistency")
NORM_EPS = 1e-5
NORM_RHO = 0.1


class DimensionError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Non-finite loss or parameters; the caller aborts the branch."""


# --------------------------------------------------------------------------
# parameter vectors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 values plus a named layout that partitions them."""

    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        pos = 0
        for seg in self.layout:
            if seg.offset != pos:
                raise ValueError(f"segment {seg.name!r} leaves a gap or overlap at offset {pos}")
            pos += seg.size
        if pos != len(values):
            raise ValueError(f"layout covers {pos} values, vector has {len(values)}")
        if not np.all(np.isfinite(values)):
            raise DivergenceError("parameter vector contains non-finite values")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(name)

    def names(self) -> list[str]:
        return [seg.name for seg in self.layout]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros(len(self.values)), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def equals(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    @classmethod
    def from_segments(cls, parts: list[tuple[str, np.ndarray]]) -> "ParamVector":
        layout = []
        pos = 0
        for name, arr in parts:
            arr = np.asarray(arr)
            layout.append(Segment(name, pos, tuple(arr.shape)))
            pos += arr.size
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for _, a in parts]) if parts else np.zeros(0)
        return cls(flat, tuple(layout))


# --------------------------------------------------------------------------
# specs and data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden_sizes: tuple[int, ...] = ()
    norm: bool = False
    head: str | None = None  # "softmax" | "identity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("model dims must be positive")
        if self.kind != "mlp" and (self.hidden_sizes or self.norm):
            raise ValueError("hidden_sizes/norm only apply to mlp models")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")
        if self.head is None:
            default = "softmax" if self.kind in ("logistic", "mlp") else "identity"
            object.__setattr__(self, "head", default)
        if self.head not in ("softmax", "identity"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.kind == "logistic" and self.head != "softmax":
            raise ValueError("logistic models use a softmax head")

    @classmethod
    def embedder(cls, input_dim: int, embed_dim: int) -> "ModelSpec":
        return cls("embedder", input_dim, embed_dim)

    @property
    def classifies(self) -> bool:
        return self.head == "softmax"

    @property
    def n_norm_layers(self) -> int:
        return len(self.hidden_sizes) if self.norm else 0


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "supervised"  # supervised | teacher_consistency | contrastive
    lam: float = 0.1
    temperature: float = 0.2

    def __post_init__(self):
        if self.kind not in ("supervised", "teacher_consistency", "contrastive"):
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.lam < 0 or self.temperature <= 0:
            raise ValueError("objective constants out of range")


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    task: str
    pairs: np.ndarray | None = None  # positive views for contrastive data

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("inputs", "targets", "pairs"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, copy=True)
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)
        if self.inputs.ndim != 2 or len(self.targets) != len(self.inputs):
            raise DimensionError("inputs must be [n, d] with one target per row")

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.n)

    def batch(self, ids, aug_noise: float = 0.0, aug_seeds=None, weights=None) -> "Batch":
        ids = np.asarray(ids, dtype=np.int64)
        x = self.inputs[ids]
        pairs = self.pairs[ids] if self.pairs is not None else None
        if aug_noise > 0.0 and aug_seeds is not None:
            x = x + aug_noise * augmentation_noise(aug_seeds, x.shape[1])
        return Batch(ids, x, self.targets[ids], pairs, None if weights is None else np.asarray(weights, float))


@dataclass(frozen=True, eq=False)
class Batch:
    ids: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    pairs: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True, eq=False)
class Probe:
    inputs: np.ndarray
    targets: np.ndarray | None = None
    frozen: bool = True

    def __post_init__(self):
        for name in ("inputs", "targets"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, copy=True)
                arr.flags.writeable = not self.frozen
                object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True, eq=False)
class PredictiveOutput:
    values: np.ndarray  # probabilities (classification) or means
    classification: bool
    activations: tuple[np.ndarray, ...] = ()
    raw: np.ndarray | None = None  # logits / pre-head outputs

    def __post_init__(self):
        if self.classification:
            rows = self.values.sum(axis=1)
            if not np.all(np.abs(rows - 1.0) <= 1e-9):
                raise ValueError("classification rows must sum to 1")


@dataclass(frozen=True, eq=False)
class NormLayer:
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass(frozen=True, eq=False)
class NormState:
    layers: tuple[NormLayer, ...] = ()
    rho: float = NORM_RHO

    @classmethod
    def fresh(cls, spec: ModelSpec, rho: float = NORM_RHO) -> "NormState":
        layers = tuple(NormLayer(np.zeros(h), np.ones(h)) for h in spec.hidden_sizes) if spec.norm else ()
        return cls(layers, rho)

    def equals(self, other: "NormState") -> bool:
        return self.rho == other.rho and len(self.layers) == len(other.layers) and all(
            np.array_equal(a.running_mean, b.running_mean) and np.array_equal(a.running_var, b.running_var)
            for a, b in zip(self.layers, other.layers)
        )


def augmentation_noise(aug_seeds, dim: int) -> np.ndarray:
    """Per-example standard normal jitter driven only by that example's seed."""
    rows = []
    for seed in np.asarray(aug_seeds, dtype=np.uint64):
        rows.append(RngStream("aug", int(seed)).normal(dim))
    return np.array(rows).reshape(len(rows), dim)


# --------------------------------------------------------------------------
# init / forward / backward
# --------------------------------------------------------------------------


def _linear_shapes(spec: ModelSpec) -> list[tuple[str, int, int, bool]]:
    """(prefix, fan_in, fan_out, normalized) per affine layer."""
    if spec.kind != "mlp":
        return [("", spec.input_dim, spec.output_dim, False)]
    dims = [spec.input_dim, *spec.hidden_sizes]
    layers = [(f"l{i}.", dims[i], dims[i + 1], spec.norm) for i in range(len(spec.hidden_sizes))]
    layers.append(("out.", dims[-1], spec.output_dim, False))
    return layers


def init_model(spec: ModelSpec, stream: RngStream) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; unit/zero norm affine."""
    parts = []
    for prefix, fan_in, fan_out, normed in _linear_shapes(spec):
        bound = 1.0 / np.sqrt(fan_in)
        w = (2.0 * stream.uniform(fan_in * fan_out) - 1.0) * bound
        parts.append((prefix + "W", w.reshape(fan_in, fan_out)))
        if normed:
            parts.append((prefix + "gamma", np.ones(fan_out)))
            parts.append((prefix + "beta", np.zeros(fan_out)))
        else:
            parts.append((prefix + "b", (2.0 * stream.uniform(fan_out) - 1.0) * bound))
    return ParamVector.from_segments(parts)


def _check_inputs(spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"expected inputs [*, {spec.input_dim}], got {x.shape}")
    return x


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cache(spec: ModelSpec, params: ParamVector, x: np.ndarray, norm: NormState, train: bool):
    """Returns (raw outputs, caches per layer, batch stats per norm layer, activations)."""
    caches = []
    stats = []
    acts = []
    a = x
    layers = _linear_shapes(spec)
    for li, (prefix, _, _, normed) in enumerate(layers):
        W = params[prefix + "W"]
        u = a @ W
        last = li == len(layers) - 1
        if last:
            u = u + params[prefix + "b"]
            caches.append({"a_in": a})
            return u, caches, stats, acts
        if normed:
            if train:
                mu = u.mean(axis=0)
                var = ((u - mu) ** 2).mean(axis=0)
                stats.append((mu, var))
            else:
                mu = norm.layers[li].running_mean
                var = norm.layers[li].running_var
            inv_std = 1.0 / np.sqrt(var + NORM_EPS)
            xhat = (u - mu) * inv_std
            y = params[prefix + "gamma"] * xhat + params[prefix + "beta"]
            caches.append({"a_in": a, "xhat": xhat, "inv_std": inv_std, "y": y, "train": train})
        else:
            y = u + params[prefix + "b"]
            caches.append({"a_in": a, "y": y})
        a = np.maximum(y, 0.0)
        acts.append(a)
    raise AssertionError("unreachable")


def forward(spec: ModelSpec, params: ParamVector, inputs, norm: NormState | None = None, mode: str = "eval") -> PredictiveOutput:
    x = _check_inputs(spec, inputs)
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    norm = norm if norm is not None else NormState.fresh(spec)
    raw, _, _, acts = _forward_cache(spec, params, x, norm, mode == "train")
    values = _softmax(raw) if spec.classifies else raw
    return PredictiveOutput(values, spec.classifies, tuple(acts), raw)


def _backward(spec: ModelSpec, params: ParamVector, caches, d_raw: np.ndarray) -> np.ndarray:
    grads = {}
    layers = _linear_shapes(spec)
    prefix, *_ = layers[-1]
    a_in = caches[-1]["a_in"]
    grads[prefix + "W"] = a_in.T @ d_raw
    grads[prefix + "b"] = d_raw.sum(axis=0)
    da = d_raw @ params[prefix + "W"].T
    for li in range(len(layers) - 2, -1, -1):
        prefix, _, _, normed = layers[li]
        c = caches[li]
        dy = da * (c["y"] > 0.0)
        if normed:
            xhat, inv_std = c["xhat"], c["inv_std"]
            gamma = params[prefix + "gamma"]
            grads[prefix + "gamma"] = (dy * xhat).sum(axis=0)
            grads[prefix + "beta"] = dy.sum(axis=0)
            dxhat = dy * gamma
            if c["train"]:
                m = dxhat.shape[0]
                du = inv_std / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                du = dxhat * inv_std
        else:
            grads[prefix + "b"] = dy.sum(axis=0)
            du = dy
        grads[prefix + "W"] = c["a_in"].T @ du
        da = du @ params[prefix + "W"].T
    return np.concatenate([grads[seg.name].reshape(-1) for seg in params.layout])


def _updated_norm(norm: NormState, stats) -> NormState:
    if not stats:
        return norm
    rho = norm.rho
    layers = tuple(
        NormLayer((1.0 - rho) * layer.running_mean + rho * mu, (1.0 - rho) * layer.running_var + rho * var)
        for layer, (mu, var) in zip(norm.layers, stats)
    )
    return NormState(layers, rho)


def _supervised(spec: ModelSpec, raw: np.ndarray, targets: np.ndarray, weights: np.ndarray | None):
    n = raw.shape[0]
    w = np.ones(n) if weights is None else weights
    if spec.classifies:
        y = np.asarray(targets, dtype=np.int64)
        z = raw - raw.max(axis=1, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=1))
        per = logz - z[np.arange(n), y]
        p = np.exp(z - logz[:, None])
        p[np.arange(n), y] -= 1.0
        return float(np.dot(w, per) / n), p * (w / n)[:, None]
    t = np.asarray(targets, dtype=np.float64).reshape(n, -1)
    r = raw - t
    per = 0.5 * (r * r).sum(axis=1)
    return float(np.dot(w, per) / n), r * (w / n)[:, None]


def _unit(z: np.ndarray):
    nrm = np.sqrt((z * z).sum(axis=1, keepdims=True))
    nrm = np.maximum(nrm, 1e-12)
    return z / nrm, nrm


def embed(spec: ModelSpec, params: ParamVector, inputs, norm: NormState | None = None) -> np.ndarray:
    """L2-normalized eval-mode outputs (contrastive keys)."""
    out = forward(spec, params, inputs, norm, "eval")
    return _unit(out.raw)[0]


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: Batch, norm: NormState | None,
                  objective: ObjectiveSpec = ObjectiveSpec(), teacher: ParamVector | None = None,
                  queue: np.ndarray | None = None):
    """Train-mode loss, flat gradient (same layout as params) and updated norm stats.

    teacher_consistency adds ``lam * mean ||f(x) - f_teacher(x)||^2`` on the raw
    outputs; contrastive is InfoNCE with the pair view as positive and queue rows
    as negatives, gradients flowing through both views.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    norm = norm if norm is not None else NormState.fresh(spec)
    x = _check_inputs(spec, batch.inputs)
    raw, caches, stats, _ = _forward_cache(spec, params, x, norm, True)
    n = raw.shape[0]

    if objective.kind == "contrastive":
        if batch.pairs is None:
            raise ValueError("contrastive objective needs pair views")
        tau = objective.temperature
        raw_k, caches_k, _, _ = _forward_cache(spec, params, _check_inputs(spec, batch.pairs), norm, True)
        q, qn = _unit(raw)
        k, kn = _unit(raw_k)
        pos = (q * k).sum(axis=1) / tau
        if queue is not None and len(queue):
            neg = q @ np.asarray(queue).T / tau
            logits = np.concatenate([pos[:, None], neg], axis=1)
        else:
            logits = pos[:, None]
            neg = None
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        lse = np.log(e.sum(axis=1)) + m[:, 0]
        loss = float((lse - pos).mean())
        p = e / e.sum(axis=1, keepdims=True)
        coef = (p[:, 0] - 1.0) / (tau * n)
        gq = coef[:, None] * k
        if neg is not None:
            gq = gq + (p[:, 1:] / (tau * n)) @ np.asarray(queue)
        gk = coef[:, None] * q
        d_raw = (gq - q * (q * gq).sum(axis=1, keepdims=True)) / qn
        d_raw_k = (gk - k * (k * gk).sum(axis=1, keepdims=True)) / kn
        grad = _backward(spec, params, caches, d_raw) + _backward(spec, params, caches_k, d_raw_k)
    else:
        loss, d_raw = _supervised(spec, raw, batch.targets, batch.weights)
        if objective.kind == "teacher_consistency":
            if teacher is None:
                raise ValueError("teacher_consistency objective needs teacher weights")
            t_raw, _, _, _ = _forward_cache(spec, teacher, x, norm, False)
            diff = raw - t_raw
            loss += objective.lam * float((diff * diff).sum(axis=1).mean())
            d_raw = d_raw + (2.0 * objective.lam / n) * diff
        grad = _backward(spec, params, caches, d_raw)

    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite loss {loss}")
    return loss, params.with_values(grad), _updated_norm(norm, stats)


def eval_loss(spec: ModelSpec, params: ParamVector, data: Dataset | Batch, norm: NormState | None = None) -> float:
    """Eval-mode supervised loss on a dataset."""
    out = forward(spec, params, data.inputs, norm, "eval")
    loss, _ = _supervised(spec, out.raw, data.targets, None)
    return loss


def recalibrated_norm(spec: ModelSpec, params: ParamVector, norm: NormState, inputs) -> NormState:
    """Running stats replaced by exact batch statistics of one train-mode pass."""
    if not spec.norm:
        return norm
    x = _check_inputs(spec, inputs)
    if len(x) == 0:
        raise ValueError("empty calibration slice")
    _, _, stats, _ = _forward_cache(spec, params, x, norm, True)
    return NormState(tuple(NormLayer(mu.copy(), var.copy()) for mu, var in stats), norm.rho)


def barrier_scan(spec: ModelSpec, a: ParamVector, b: ParamVector, data: Dataset, points: int,
                 norm: NormState | None = None, calib=None) -> list[tuple[float, float]]:
    """Eval loss along (1-t)a + tb; norm stats re-estimated at each point on ``calib``."""
    if not a.same_layout(b):
        raise DimensionError("endpoints have different layouts")
    if points < 2:
        raise ValueError("points must be >= 2")
    norm = norm if norm is not None else NormState.fresh(spec)
    calib = data.inputs if calib is None else calib
    out = []
    for lam in np.linspace(0.0, 1.0, points):
        theta = a.with_values((1.0 - lam) * a.values + lam * b.values)
        stats = recalibrated_norm(spec, theta, norm, calib)
        out.append((float(lam), eval_loss(spec, theta, data, stats)))
    return out


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def _generate(task: str, n: int, input_dim: int, noise: float, stream: RngStream,
              n_classes: int, output_dim: int, separation: float):
    if n <= 0:
        raise ValueError("n must be positive")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if task in ("classify", "contrastive"):
        centers = separation * stream.normal(n_classes * input_dim).reshape(n_classes, input_dim)
        labels = np.arange(n) % n_classes
        x = centers[labels] + noise * stream.normal(n * input_dim).reshape(n, input_dim)
        pairs = None
        if task == "contrastive":
            pairs = centers[labels] + noise * stream.normal(n * input_dim).reshape(n, input_dim)
        return x, labels, pairs
    w = stream.normal(input_dim * output_dim).reshape(input_dim, output_dim) / np.sqrt(input_dim)
    b = stream.normal(output_dim)
    x = stream.normal(n * input_dim).reshape(n, input_dim)
    y = x @ w + b
    if noise > 0.0:
        y = y + noise * stream.normal(n * output_dim).reshape(n, output_dim)
    return x, y, None


def make_synthetic(task: str, n: int, input_dim: int, noise: float, stream: RngStream, *,
                   n_classes: int = 2, output_dim: int = 1, separation: float = 3.0) -> Dataset:
    """Gaussian blobs (classify), linear ground truth plus noise (regress,
    teacher_consistency) or clustered pairs (contrastive)."""
    x, y, pairs = _generate(task, n, input_dim, noise, stream, n_classes, output_dim, separation)
    return Dataset(x, y, task, pairs)


def make_task_data(task: str, n: int, probe_size: int, input_dim: int, noise: float, stream: RngStream, *,
                   n_classes: int = 2, output_dim: int = 1, separation: float = 3.0) -> tuple[Dataset, Probe]:
    """A training set and a held-out frozen probe drawn from the same generator."""
    x, y, pairs = _generate(task, n + probe_size, input_dim, noise, stream, n_classes, output_dim, separation)
    data = Dataset(x[:n], y[:n], task, None if pairs is None else pairs[:n])
    return data, Probe(x[n:], y[n:], frozen=True)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

_DS_MAGIC = b"MEMH-DS1"
_DS_VERSION = 1
_PROBE_INT, _PROBE_REAL = 254, 255


def _pack_matrix(arr) -> bytes:
    if arr is None:
        return struct.pack("<II", 0, 0)
    m = np.asarray(arr, dtype=np.float64)
    m = m.reshape(len(m), -1)
    return struct.pack("<II", *m.shape) + m.astype("<f8").tobytes()


def _unpack_matrix(buf: bytes, pos: int):
    rows, cols = struct.unpack_from("<II", buf, pos)
    pos += 8
    size = rows * cols * 8
    if pos + size > len(buf):
        raise ValueError("truncated matrix block")
    m = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).astype(np.float64).reshape(rows, cols)
    return m, pos + size


def dataset_to_bytes(data: Dataset | Probe) -> bytes:
    if isinstance(data, Probe):
        int_targets = data.targets is not None and np.issubdtype(data.targets.dtype, np.integer)
        task_code, mats = _PROBE_INT if int_targets else _PROBE_REAL, [data.inputs, data.targets, None]
    else:
        task_code, mats = TASKS.index(data.task), [data.inputs, data.targets, data.pairs]
    n = len(data.inputs)
    out = [_DS_MAGIC, struct.pack("<II", _DS_VERSION, n), struct.pack("<II", task_code, len(mats))]
    out += [_pack_matrix(m) for m in mats]
    return b"".join(out)


def dataset_from_bytes(buf: bytes) -> Dataset | Probe:
    if buf[:8] != _DS_MAGIC:
        raise ValueError("not a MEMH-DS1 block")
    version, n = struct.unpack_from("<II", buf, 8)
    if version != _DS_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    task_code, count = struct.unpack_from("<II", buf, 16)
    pos = 24
    mats = []
    for _ in range(count):
        m, pos = _unpack_matrix(buf, pos)
        mats.append(m if m.size else None)
    inputs, targets, pairs = mats
    if len(inputs) != n:
        raise ValueError("row count does not match header")
    if task_code in (_PROBE_INT, _PROBE_REAL):
        if targets is not None and task_code == _PROBE_INT:
            targets = targets[:, 0].astype(np.int64)
        return Probe(inputs, targets)
    task = TASKS[task_code]
    if task in ("classify", "contrastive"):
        targets = targets[:, 0].astype(np.int64)
    return Dataset(inputs, targets, task, pairs)
