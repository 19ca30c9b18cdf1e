"""Effect estimation, equivalence testing and probe readouts."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy import stats as sps

from memhist.model import PredictiveOutput
from memhist.rng import RngStream

DEFAULT_B = 10_000
NLL_FLOOR = 1e-12
DISTANCES = ("tv", "js", "hellinger")
READOUTS = DISTANCES + ("disagreement", "acc", "ece", "nll")


def significant(x: float, digits: int = 4) -> str:
    return f"{x:.{digits}g}"


@dataclass(frozen=True)
class EffectEstimate:
    ate: float
    ci_lo: float
    ci_hi: float
    B: int
    per_seed: tuple[float, ...]
    contains_mean: bool = True

    @property
    def ci_width(self) -> float:
        return self.ci_hi - self.ci_lo

    @property
    def excludes_zero(self) -> bool:
        return self.ci_lo > 0 or self.ci_hi < 0


def paired_ate_ci(z, B: int = DEFAULT_B, stream: RngStream | None = None, level: float = 0.95) -> EffectEstimate:
    """Mean of per-seed effects with a percentile bootstrap CI (type-7 quantiles)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or len(z) == 0:
        raise ValueError("need at least one per-seed effect")
    if B < 1:
        raise ValueError("B must be >= 1")
    if stream is None:
        stream = RngStream("boot", 0)
    n = len(z)
    idx = stream.integers(n, B * n).reshape(B, n)
    means = z[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail], method="linear")
    ate = float(z.mean())
    if np.all(z == z[0]):
        lo = hi = ate = float(z[0])
    contains = bool(lo <= ate <= hi)
    if not contains and B >= 1000:
        warnings.warn(f"bootstrap CI [{lo}, {hi}] does not contain the mean {ate}", RuntimeWarning, stacklevel=2)
    return EffectEstimate(ate, float(lo), float(hi), B, tuple(float(v) for v in z), contains)


def enumerated_ate_ci(z, level: float = 0.95) -> tuple[float, float]:
    """Percentiles of the exact bootstrap distribution over all n**n equiprobable
    resamples (small n only): the limit of ``paired_ate_ci`` as B grows.

    Each endpoint is the smallest resample mean whose cumulative probability reaches
    the tail level, so no interpolation happens between atoms.
    """
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    if n == 0:
        raise ValueError("need at least one per-seed effect")
    if n > 7:
        raise ValueError("exhaustive enumeration is limited to n <= 7")
    grids = np.stack(np.meshgrid(*([np.arange(n)] * n), indexing="ij"), axis=-1).reshape(-1, n)
    means = np.sort(z[grids].mean(axis=1))
    total = len(means)
    tail = (1.0 - level) / 2.0
    lo = means[max(math.ceil(tail * total - 1e-9), 1) - 1]
    hi = means[max(math.ceil((1.0 - tail) * total - 1e-9), 1) - 1]
    return float(lo), float(hi)


@dataclass(frozen=True)
class EquivalenceResult:
    mean_delta: float
    s: float
    n: int
    epsilon: float
    alpha: float
    p_lower: float
    p_upper: float
    ci_1m2a: tuple[float, float]
    equivalent: bool

    @property
    def equivalent_by_ci(self) -> bool:
        lo, hi = self.ci_1m2a
        return -self.epsilon < lo and hi < self.epsilon


def tost(deltas, epsilon: float, alpha: float = 0.05) -> EquivalenceResult:
    """Two one-sided t tests of |mean| < epsilon; df = n - 1."""
    d = np.asarray(deltas, dtype=np.float64)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    n = len(d)
    if n < 2:
        raise ValueError(f"TOST needs at least 2 seeds for df = n - 1 >= 1 (got {n})")
    mean = float(d.mean())
    s = float(d.std(ddof=1))
    se = s / math.sqrt(n)
    if np.all(d == d[0]) or se == 0.0:
        # zero variance (or se underflow): each one-sided p is its s -> 0 limit
        mean = float(d[0]) if np.all(d == d[0]) else mean
        p_lower = 0.0 if mean > -epsilon else 1.0
        p_upper = 0.0 if mean < epsilon else 1.0
        return EquivalenceResult(mean, 0.0, n, epsilon, alpha, p_lower, p_upper, (mean, mean),
                                 p_lower == p_upper == 0.0)
    df = n - 1
    t_lower = (mean + epsilon) / se
    t_upper = (mean - epsilon) / se
    p_lower = float(sps.t.sf(t_lower, df))
    p_upper = float(sps.t.cdf(t_upper, df))
    q = float(sps.t.ppf(1.0 - alpha, df))
    ci = (mean - q * se, mean + q * se)
    equivalent = p_lower < alpha and p_upper < alpha
    return EquivalenceResult(mean, s, n, epsilon, alpha, p_lower, p_upper, ci, equivalent)


# --------------------------------------------------------------------------
# readouts
# --------------------------------------------------------------------------


def _check_dists(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("distributions must be non-negative")
    if not (np.allclose(p.sum(axis=1), 1.0, atol=1e-9) and np.allclose(q.sum(axis=1), 1.0, atol=1e-9)):
        raise ValueError("distributions must sum to 1")
    return p, q


def _xlog2(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a > 0, a * np.log2(np.where(a > 0, a, 1.0) / np.where(b > 0, b, 1.0)), 0.0)


def prob_distance_rows(p, q, kind: str) -> np.ndarray:
    p, q = _check_dists(p, q)
    if kind == "tv":
        out = 0.5 * np.abs(p - q).sum(axis=1)
    elif kind == "js":
        m = 0.5 * (p + q)
        out = 0.5 * _xlog2(p, m).sum(axis=1) + 0.5 * _xlog2(q, m).sum(axis=1)
    elif kind == "hellinger":
        out = np.sqrt(np.maximum(1.0 - np.sqrt(p * q).sum(axis=1), 0.0))
    else:
        raise ValueError(f"unknown distance {kind!r}")
    return np.clip(out, 0.0, 1.0)


def prob_distance(p, q, kind: str) -> float:
    """Mean distance over rows; a single distribution is one row."""
    return float(prob_distance_rows(p, q, kind).mean())


def _gaussian_js(d: float) -> float:
    """JS (base 2) between N(0, 1) and N(d, 1)."""
    if d == 0.0:
        return 0.0

    def integrand(x):
        lp = sps.norm.logpdf(x)
        lq = sps.norm.logpdf(x - d)
        lm = np.logaddexp(lp, lq) - math.log(2.0)
        return math.exp(lp) * (lp - lm) + math.exp(lq) * (lq - lm)

    val, _ = integrate.quad(integrand, -12.0, d + 12.0, limit=200)
    return float(np.clip(0.5 * val / math.log(2.0), 0.0, 1.0))


def gaussian_distance_rows(mu_a, mu_b, sigma: float, kind: str) -> np.ndarray:
    """Distances between isotropic Gaussians N(mu_a, s^2 I) and N(mu_b, s^2 I) per row."""
    a = np.atleast_2d(np.asarray(mu_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(mu_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("mean arrays must share a shape")
    d = np.linalg.norm(a - b, axis=1) / sigma
    if kind == "tv":
        return 2.0 * sps.norm.cdf(d / 2.0) - 1.0
    if kind == "hellinger":
        return np.sqrt(1.0 - np.exp(-d * d / 8.0))
    if kind == "js":
        return np.array([_gaussian_js(float(v)) for v in d])
    raise ValueError(f"unknown distance {kind!r}")


def disagreement(a: PredictiveOutput, b: PredictiveOutput) -> float:
    if not (a.classification and b.classification):
        raise ValueError("disagreement needs classification outputs")
    if a.values.shape != b.values.shape:
        raise ValueError("outputs cover different probes")
    # np.argmax returns the lowest index among ties
    return float(np.mean(np.argmax(a.values, axis=1) != np.argmax(b.values, axis=1)))


def accuracy(preds, labels) -> float:
    p = np.asarray(preds, dtype=np.float64)
    return float(np.mean(np.argmax(p, axis=1) == np.asarray(labels)))


def _labels(preds, labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or len(y) != len(preds):
        raise ValueError("one label per prediction row required")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= preds.shape[1]:
        raise ValueError("labels must be class indices")
    return y


def ece(preds, labels, bins: int = 15) -> float:
    """Expected calibration error with equal-width bins on max probability."""
    p = np.asarray(preds, dtype=np.float64)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    y = _labels(p, labels)
    conf = p.max(axis=1)
    correct = (np.argmax(p, axis=1) == y).astype(np.float64)
    # bin b covers (b/bins, (b+1)/bins]; confidence 0 joins the first bin
    which = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    total = 0.0
    N = len(y)
    for b in range(bins):
        mask = which == b
        nb = int(mask.sum())
        if nb:
            total += nb / N * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


@dataclass(frozen=True)
class NllResult:
    value: float
    clamped: int = 0  # rows whose true-label probability hit the floor


def nll(preds, labels) -> NllResult:
    p = np.asarray(preds, dtype=np.float64)
    y = _labels(p, labels)
    pt = p[np.arange(len(y)), y]
    clamped = int(np.sum(pt < NLL_FLOOR))
    return NllResult(float(-np.mean(np.log(np.maximum(pt, NLL_FLOOR)))), clamped)


def linear_cka(X, Y) -> float:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError("activations must be 2-D with matching rows")
    if len(X) < 2:
        raise ValueError("linear CKA needs at least 2 examples")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    xx = np.linalg.norm(Xc.T @ Xc)
    yy = np.linalg.norm(Yc.T @ Yc)
    if xx == 0.0 or yy == 0.0:
        raise ValueError("linear CKA is undefined for zero-variance activations")
    return float(np.clip(np.linalg.norm(Xc.T @ Yc) ** 2 / (xx * yy), 0.0, 1.0))


@dataclass(frozen=True)
class Readout:
    """A per-seed probe effect z and any flags raised computing it."""

    value: float
    flags: tuple[str, ...] = field(default=())


def readout(metric: str, control: PredictiveOutput, treat: PredictiveOutput, targets=None,
            predictive_std: float = 1.0, bins: int = 15) -> Readout:
    """z = D(treat, control) averaged over the probe, or treat minus control for scalar metrics."""
    if metric not in READOUTS:
        raise ValueError(f"unknown metric {metric!r}")
    if metric in DISTANCES:
        if control.classification:
            return Readout(prob_distance(treat.values, control.values, metric))
        return Readout(float(gaussian_distance_rows(treat.values, control.values, predictive_std, metric).mean()))
    if metric == "disagreement":
        return Readout(disagreement(treat, control))
    if not control.classification:
        raise ValueError(f"metric {metric!r} needs classification outputs")
    if targets is None:
        raise ValueError(f"metric {metric!r} needs probe labels")
    if metric == "acc":
        return Readout(accuracy(treat.values, targets) - accuracy(control.values, targets))
    if metric == "ece":
        return Readout(ece(treat.values, targets, bins) - ece(control.values, targets, bins))
    a, b = nll(treat.values, targets), nll(control.values, targets)
    flags = ("nll_clamped",) if a.clamped or b.clamped else ()
    return Readout(a.value - b.value, flags)
