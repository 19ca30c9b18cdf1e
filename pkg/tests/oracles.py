"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from fractions import Fraction

import numpy as np

from memhist.model import Batch, ModelSpec, NormState, ObjectiveSpec, init_model, loss_and_grad
from memhist.rng import RngStream

FD_STEP = 1e-5
FD_RTOL = 1e-4
KINK_MARGIN = 1e-3


def fd_gradient(fn, theta: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    g = np.empty_like(theta)
    for i in range(len(theta)):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (fn(up) - fn(dn)) / (2 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _pre_activations(spec, params, x) -> list[np.ndarray]:
    a = x
    out = []
    for i in range(len(spec.hidden_sizes)):
        u = a @ params[f"l{i}.W"]
        if spec.norm:
            y = params[f"l{i}.gamma"] * (u - u.mean(axis=0)) / np.sqrt(u.var(axis=0) + 1e-5) + params[f"l{i}.beta"]
        else:
            y = u + params[f"l{i}.b"]
        out.append(y)
        a = np.maximum(y, 0.0)
    return out


def _near_kink(spec, params, batch) -> bool:
    # central differences are meaningless across a ReLU switch
    if spec.kind != "mlp":
        return False
    views = [batch.inputs] + ([batch.pairs] if batch.pairs is not None else [])
    return any(np.min(np.abs(y)) < KINK_MARGIN for x in views for y in _pre_activations(spec, params, x))


def random_instance(rng: np.random.Generator, objective_kind: str):
    """A small model, batch and objective with no ReLU pre-activation near zero."""
    while True:
        kind = rng.choice(["linear", "logistic", "mlp", "embedder"])
        d_in = int(rng.integers(2, 5))
        d_out = int(rng.integers(2, 4))
        if kind == "mlp":
            hidden = tuple(int(h) for h in rng.integers(2, 5, size=int(rng.integers(1, 3))))
            head = "softmax" if objective_kind == "supervised" and rng.random() < 0.5 else "identity"
            if objective_kind == "contrastive":
                head = "identity"
            spec = ModelSpec("mlp", d_in, d_out, hidden, bool(rng.random() < 0.5), head)
        elif kind == "logistic":
            if objective_kind == "contrastive":
                continue
            spec = ModelSpec("logistic", d_in, d_out)
        else:
            spec = ModelSpec(str(kind), d_in, d_out)
        params = init_model(spec, RngStream("init", int(rng.integers(0, 2**63))))
        params = params.with_values(params.values + 0.3 * rng.standard_normal(len(params)))
        m = int(rng.integers(3, 7))
        x = rng.standard_normal((m, d_in))
        if spec.classifies:
            y = rng.integers(0, d_out, size=m)
        else:
            y = rng.standard_normal((m, d_out))
        pairs = x + 0.3 * rng.standard_normal((m, d_in)) if objective_kind == "contrastive" else None
        weights = rng.uniform(0.5, 2.0, size=m) if objective_kind == "supervised" and rng.random() < 0.5 else None
        batch = Batch(np.arange(m), x, y, pairs, weights)
        norm = NormState.fresh(spec)
        teacher = None
        queue = None
        if objective_kind == "teacher_consistency":
            teacher = params.with_values(params.values + 0.2 * rng.standard_normal(len(params)))
        if objective_kind == "contrastive" and rng.random() < 0.7:
            q = rng.standard_normal((int(rng.integers(1, 6)), d_out))
            queue = q / np.linalg.norm(q, axis=1, keepdims=True)
        objective = ObjectiveSpec(objective_kind, lam=float(rng.uniform(0.05, 1.0)), temperature=0.2)
        if _near_kink(spec, params, batch):
            continue
        return spec, params, batch, norm, objective, teacher, queue


def gradient_error(spec, params, batch, norm, objective, teacher, queue) -> float:
    _, grad, _ = loss_and_grad(spec, params, batch, norm, objective, teacher, queue)

    def loss(theta):
        return loss_and_grad(spec, params.with_values(theta), batch, norm, objective, teacher, queue)[0]

    return max_rel_error(grad.values, fd_gradient(loss, params.values.copy()))


def splitmix_oracle(seed: int, count: int) -> list[int]:
    mask = (1 << 64) - 1
    x = seed
    out = []
    for _ in range(count):
        x = (x + 0x9E3779B97F4A7C15) & mask
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def enumeration_oracle(z, tail: Fraction = Fraction(1, 40)) -> tuple[float, float]:
    """Inverse CDF of the exact bootstrap-mean distribution at tail and 1 - tail."""
    z = list(z)
    counts = Counter(sum(c) / len(z) for c in itertools.product(z, repeat=len(z)))
    total = len(z) ** len(z)

    def quantile(q):
        seen = 0
        for mean in sorted(counts):
            seen += counts[mean]
            if Fraction(seen, total) >= q:
                return mean

    return quantile(tail), quantile(1 - tail)


def t4_cdf(t: float) -> float:
    """Closed-form Student-t CDF with 4 degrees of freedom."""
    x = t / math.sqrt(t * t + 4)
    return 0.5 + 0.75 * x * (1 - x * x / 3)
