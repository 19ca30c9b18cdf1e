"""Stateful optimizers, weight averaging and LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from memhist.model import ModelSpec, ParamVector


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class SgdMomentum:
    velocity: ParamVector
    beta: float = 0.9
    step_count: int = 0

    kind = "sgd"

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")

    def buffers(self) -> dict[str, ParamVector]:
        return {"velocity": self.velocity}


@dataclass(frozen=True, eq=False)
class AdamW:
    m: ParamVector
    v: ParamVector
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0

    kind = "adamw"

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1, beta2 must lie in [0, 1)")

    def buffers(self) -> dict[str, ParamVector]:
        return {"m": self.m, "v": self.v}


OptimizerState = SgdMomentum | AdamW


def sgd_momentum(params: ParamVector, beta: float = 0.9) -> SgdMomentum:
    return SgdMomentum(params.zeros_like(), beta)


def adamw(params: ParamVector, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01) -> AdamW:
    return AdamW(params.zeros_like(), params.zeros_like(), beta1, beta2, eps, weight_decay)


@dataclass(frozen=True)
class Schedule:
    """Linear warmup then constant or cosine decay, with an optional rewarm.

    A rewarm re-applies a K-step linear ramp starting at ``rewarm_at`` on top
    of the base curve.
    """

    base_lr: float
    warmup_steps: int = 0
    kind: str = "constant"
    total_steps: int | None = None
    rewarm_at: int | None = None
    rewarm_steps: int = 0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_steps < 0 or self.rewarm_steps < 0:
            raise ValueError("warmup lengths must be non-negative")
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cosine" and not self.total_steps:
            raise ValueError("cosine schedule needs total_steps")

    def lr(self, t: int) -> float:
        K = self.warmup_steps
        if t < K:
            lr = self.base_lr * (t + 1) / K
        elif self.kind == "cosine" and self.total_steps > K:
            span = self.total_steps - K
            # clamp short of the end so lr stays strictly positive
            progress = min(t - K, span - 1) / span
            lr = self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
        else:
            lr = self.base_lr
        if self.rewarm_at is not None and self.rewarm_steps > 0 and self.rewarm_at <= t < self.rewarm_at + self.rewarm_steps:
            lr *= (t - self.rewarm_at + 1) / self.rewarm_steps
        return lr

    def with_rewarm(self, t0: int, K: int) -> "Schedule":
        return replace(self, rewarm_at=t0, rewarm_steps=K)


def _check_layouts(params: ParamVector, *others: ParamVector):
    for other in others:
        if not params.same_layout(other):
            raise ValueError("layout mismatch between params and optimizer buffers")


def step(params: ParamVector, grad: ParamVector, opt: OptimizerState, sched: Schedule, t: int | None = None):
    """One update. ``t`` is the schedule position (defaults to opt.step_count)."""
    g = grad.values
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient contains non-finite values")
    lr = sched.lr(opt.step_count if t is None else t)
    theta = params.values
    if isinstance(opt, SgdMomentum):
        _check_layouts(params, grad, opt.velocity)
        v = opt.beta * opt.velocity.values + (1.0 - opt.beta) * g
        new = theta - lr * v
        return params.with_values(new), SgdMomentum(opt.velocity.with_values(v), opt.beta, opt.step_count + 1)
    _check_layouts(params, grad, opt.m, opt.v)
    count = opt.step_count + 1
    m = opt.beta1 * opt.m.values + (1.0 - opt.beta1) * g
    v = opt.beta2 * opt.v.values + (1.0 - opt.beta2) * (g * g)
    m_hat = m / (1.0 - opt.beta1 ** count)
    v_hat = v / (1.0 - opt.beta2 ** count)
    new = theta - lr * (m_hat / (np.sqrt(v_hat) + opt.eps)) - lr * opt.weight_decay * theta
    return params.with_values(new), replace(opt, m=opt.m.with_values(m), v=opt.v.with_values(v), step_count=count)


def half_life(beta: float) -> float:
    """Steps until a past gradient's weight halves: log(0.5) / log(beta)."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    return math.log(0.5) / math.log(beta)


def reset_optimizer(opt: OptimizerState) -> OptimizerState:
    """Zero all moment buffers and the bias-correction count; constants are kept."""
    if isinstance(opt, SgdMomentum):
        return SgdMomentum(opt.velocity.zeros_like(), opt.beta, 0)
    return replace(opt, m=opt.m.zeros_like(), v=opt.v.zeros_like(), step_count=0)


# --------------------------------------------------------------------------
# averaging
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmaState:
    """Exponential average of weights. Also used for the mean teacher.

    ``thaw_at`` and ``restore_alpha`` encode a pending hold: at step
    ``thaw_at`` the average unfreezes and, if set, alpha returns to
    ``restore_alpha``.
    """

    weights: ParamVector
    alpha: float
    frozen: bool = False
    thaw_at: int | None = None
    restore_alpha: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class SwaState:
    sum: ParamVector
    count: int = 0
    start: int = 0  # first step whose weights are collected
    frozen: bool = False
    thaw_at: int | None = None

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("swa count must be non-negative")


@dataclass(frozen=True, eq=False)
class AveragingState:
    ema: EmaState | None = None
    swa: SwaState | None = None
    teacher: EmaState | None = None


def _ema_update(ema: EmaState | None, params: ParamVector) -> EmaState | None:
    if ema is None or ema.frozen:
        return ema
    _check_layouts(params, ema.weights)
    w = ema.alpha * ema.weights.values + (1.0 - ema.alpha) * params.values
    return replace(ema, weights=ema.weights.with_values(w))


def averaging_update(avg: AveragingState, params: ParamVector, t: int | None = None) -> AveragingState:
    """Fold post-step weights into EMA, teacher and SWA. ``t`` gates SWA collection."""
    swa = avg.swa
    if swa is not None and not swa.frozen and (t is None or t >= swa.start):
        _check_layouts(params, swa.sum)
        swa = replace(swa, sum=swa.sum.with_values(swa.sum.values + params.values), count=swa.count + 1)
    return AveragingState(_ema_update(avg.ema, params), swa, _ema_update(avg.teacher, params))


def swa_finalize(avg: AveragingState, spec: ModelSpec) -> tuple[ParamVector, bool]:
    """Mean of collected weights, and whether norm stats must be re-estimated."""
    swa = avg.swa
    if swa is None or swa.count == 0:
        raise ValueError("swa has collected no weights")
    return swa.sum.with_values(swa.sum.values / swa.count), spec.norm


def init_averaging(params: ParamVector, ema_alpha: float | None = None, swa: bool = False,
                   swa_start: int = 0, teacher_alpha: float | None = None) -> AveragingState:
    return AveragingState(
        EmaState(params, ema_alpha) if ema_alpha is not None else None,
        SwaState(params.zeros_like(), 0, swa_start) if swa else None,
        EmaState(params, teacher_alpha) if teacher_alpha is not None else None,
    )
