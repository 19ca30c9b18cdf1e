"""Single-source interventions and the branch-and-hold engine."""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from memhist.audit import AuditTrail
from memhist.model import DivergenceError
from memhist.optim import half_life, reset_optimizer
from memhist.rng import RngStream, derive_seed
from memhist.runner import ExperimentData, Recipe, Run
from memhist.sampler import OrderRecord, order_hash, order_record_to_bytes, permute_window, record_window
from memhist.stats import READOUTS, paired_ate_ci, readout
from memhist.statekit import StatePolicy, Snapshot, apply_policy, clear_queue, deserialize, diff_components, freeze_queue, serialize

KINDS = ("identity", "opt_reset", "order_swap", "phase_policy", "teacher_lag", "queue_op")
SOURCE_TAGS = {"identity": None, "opt_reset": "S1", "order_swap": "S2", "phase_policy": "S1",
               "teacher_lag": "S5", "queue_op": "S4"}
LOCKSTEP = {"identity", "opt_reset", "phase_policy", "teacher_lag", "queue_op"}
WR_WINDOW = 1000
TEACHER_HORIZON = 2.0


class IsolationError(RuntimeError):
    pass


class DeterminismError(RuntimeError):
    pass


@dataclass(frozen=True)
class InterventionSpec:
    kind: str
    W: int
    freeze_ema: bool = False  # opt_reset: hold EMA/SWA/teacher for the window
    rewarm_K: int | None = None  # opt_reset: warmup applied to both branches
    reuse_aug: bool = True  # order_swap: augmentation seeds travel with examples
    policies: tuple[StatePolicy, ...] = ()  # phase_policy: first is Control
    k_epochs: int = 1
    alpha: float | None = None  # teacher_lag: alpha' during the window
    mode: str = "freeze"  # queue_op: freeze | clear
    source_tag: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown intervention kind {self.kind!r}")
        if self.W < 1:
            raise ValueError("W must be >= 1")
        expected = SOURCE_TAGS[self.kind]
        if self.source_tag is None:
            object.__setattr__(self, "source_tag", expected)
        elif self.source_tag != expected:
            raise ValueError(f"{self.kind} perturbs {expected}, not {self.source_tag}")
        if self.kind == "phase_policy":
            if len(self.policies) < 2:
                raise ValueError("phase_policy needs a Control policy and at least one Treat policy")
            names = [p.name for p in self.policies]
            if len(set(names)) != len(names) or not all(names):
                raise ValueError("phase policies need distinct names")
        if self.kind == "teacher_lag" and not (self.alpha is not None and 0.0 <= self.alpha < 1.0):
            raise ValueError("teacher_lag needs alpha in [0, 1)")
        if self.kind == "queue_op" and self.mode not in ("freeze", "clear"):
            raise ValueError("queue mode must be freeze or clear")
        if self.rewarm_K is not None and self.rewarm_K < 1:
            raise ValueError("rewarm_K must be >= 1")

    @property
    def lockstep(self) -> bool:
        return self.kind in LOCKSTEP

    def arms(self) -> list[str]:
        if self.kind == "phase_policy":
            names = [p.name for p in self.policies[1:]]
            return ["treat"] if len(names) == 1 else [f"treat-{n}" for n in names]
        return ["treat"]

    def intended(self, arm_index: int = 0) -> set[str]:
        """Snapshot sections this intervention may change at t0."""
        if self.kind == "identity":
            return set()
        if self.kind == "opt_reset":
            return {"optimizer"} | ({"ema", "swa", "teacher"} if self.freeze_ema else set())
        if self.kind == "order_swap":
            return {"sampler"}
        if self.kind == "teacher_lag":
            return {"teacher"}
        if self.kind == "queue_op":
            return {"queue"}
        return self.policies[0].touched() | self.policies[arm_index + 1].touched()

    def describe(self) -> dict:
        out = {"kind": self.kind, "W": self.W, "source_tag": self.source_tag}
        if self.kind == "opt_reset":
            out.update(freeze_ema=self.freeze_ema, rewarm_K=self.rewarm_K)
        elif self.kind == "order_swap":
            out.update(reuse_aug=self.reuse_aug)
        elif self.kind == "phase_policy":
            out.update(policies=[p.name for p in self.policies], k_epochs=self.k_epochs)
        elif self.kind == "teacher_lag":
            out.update(alpha=self.alpha)
        elif self.kind == "queue_op":
            out.update(mode=self.mode)
        return out


def suggest_window(kind: str, **context) -> int:
    """Window matched to the perturbed source's lifetime."""

    def need(name):
        if context.get(name) is None:
            raise ValueError(f"suggest_window({kind}) needs {name!r}")
        return context[name]

    if kind == "opt_reset":
        beta = context.get("beta1", context.get("beta"))
        if beta is None:
            raise ValueError("suggest_window(opt_reset) needs 'beta' or 'beta1'")
        return max(1, round(1.5 * half_life(beta)))
    if kind == "order_swap":
        sampler = need("sampler")
        return int(need("epoch_length")) if sampler == "rr" else WR_WINDOW
    if kind == "teacher_lag":
        return max(1, round(TEACHER_HORIZON / (1.0 - need("alpha"))))
    if kind == "queue_op":
        return math.ceil(need("K") / need("B"))
    if kind == "phase_policy":
        return int(need("k_epochs")) * int(need("epoch_length"))
    raise ValueError(f"no window rule for {kind!r}")


# --------------------------------------------------------------------------
# interventions phi: each returns the Treat snapshot
# --------------------------------------------------------------------------


def opt_reset_branch(s: Snapshot, spec: InterventionSpec) -> Snapshot:
    out = replace(s, opt=reset_optimizer(s.opt))
    if spec.freeze_ema:
        until = s.step + spec.W
        avg = out.avg
        hold = lambda e: None if e is None else replace(e, frozen=True, thaw_at=until)
        out = replace(out, avg=replace(avg, ema=hold(avg.ema), swa=hold(avg.swa), teacher=hold(avg.teacher)))
    return out


def order_swap_branch(s: Snapshot, spec: InterventionSpec, record: OrderRecord, stream: RngStream) -> tuple[Snapshot, OrderRecord]:
    permuted = permute_window(record, stream, spec.reuse_aug)
    sampler = s.sampler.copy(stream=s.manifest.streams[s.sampler.stream.name])
    sampler.pending = permuted.as_pending()
    return replace(s, sampler=sampler), permuted


def phase_policy_branch(s: Snapshot, policy: StatePolicy) -> Snapshot:
    return apply_policy(s, policy)


def teacher_lag_branch(s: Snapshot, spec: InterventionSpec) -> Snapshot:
    teacher = s.avg.teacher
    if teacher is None:
        raise ValueError("teacher_lag needs a recipe with a teacher")
    held = replace(teacher, alpha=spec.alpha, restore_alpha=teacher.alpha, thaw_at=s.step + spec.W)
    return replace(s, avg=replace(s.avg, teacher=held))


def queue_branch(s: Snapshot, spec: InterventionSpec) -> Snapshot:
    if s.queue is None:
        raise ValueError("queue_op needs a recipe with a queue")
    if spec.mode == "clear":
        return replace(s, queue=clear_queue(s.queue))
    return replace(s, queue=freeze_queue(s.queue, s.step + spec.W))


# --------------------------------------------------------------------------
# branch-and-hold
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BranchConfig:
    t0: int
    W: int
    T: int
    seeds: tuple[int, ...]  # per-seed root seeds
    metric: str = "tv"
    bn_recal: bool = False

    def __post_init__(self):
        if not (0 <= self.t0 < self.t0 + self.W <= self.T):
            raise ValueError("need 0 <= t0 < t0 + W <= T")
        if not self.seeds:
            raise ValueError("at least one seed required")
        if self.metric not in READOUTS:
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class SeedOutcome:
    index: int
    root_seed: int
    z_early: float | None
    z_final: float | None
    control_hash: str = ""
    treat_hash: str = ""
    diverged: bool = False
    flags: tuple[str, ...] = ()
    detail: str = ""


@dataclass
class BranchOutcome:
    spec: InterventionSpec
    cfg: BranchConfig
    arms: dict[str, list[SeedOutcome]] = field(default_factory=dict)

    @property
    def seeds(self) -> list[SeedOutcome]:
        return next(iter(self.arms.values()))

    def z(self, which: str = "early", arm: str | None = None) -> list[float]:
        rows = self.arms[arm] if arm else self.seeds
        return [getattr(r, f"z_{which}") for r in rows if not r.diverged]

    def excluded(self, arm: str | None = None) -> list[int]:
        rows = self.arms[arm] if arm else self.seeds
        return [r.index for r in rows if r.diverged]

    def estimate(self, which: str = "early", B: int = 10_000, boot_seed: int = 0, arm: str | None = None):
        return paired_ate_ci(self.z(which, arm), B, RngStream("boot", boot_seed))


def _intervene(base: Snapshot, spec: InterventionSpec, record: OrderRecord, permute_stream: RngStream):
    """Control and per-arm Treat snapshots forked from one base byte string."""
    blob = serialize(base)
    ctrl = deserialize(blob)
    treats, windows = [], []
    if spec.kind == "phase_policy":
        ctrl = phase_policy_branch(ctrl, spec.policies[0])
        for policy in spec.policies[1:]:
            treats.append(phase_policy_branch(deserialize(blob), policy))
            windows.append(record.hash)
        return ctrl, treats, windows
    treat = deserialize(blob)
    window = record.hash
    if spec.kind == "opt_reset":
        treat = opt_reset_branch(treat, spec)
    elif spec.kind == "order_swap":
        treat, permuted = order_swap_branch(treat, spec, record, permute_stream)
        window = permuted.hash
    elif spec.kind == "teacher_lag":
        treat = teacher_lag_branch(treat, spec)
    elif spec.kind == "queue_op":
        treat = queue_branch(treat, spec)
    return ctrl, [treat], [window]


def _trail(out_dir: Path | None, index: int, branch: str) -> AuditTrail:
    return AuditTrail(None if out_dir is None else out_dir / f"trail-seed{index}-{branch}.log")


def _write(out_dir: Path | None, name: str, data: bytes):
    if out_dir is not None:
        (out_dir / name).write_bytes(data)


def run_seed(index: int, root_seed: int, cfg: BranchConfig, spec: InterventionSpec, recipe: Recipe,
             data: ExperimentData, out_dir: str | os.PathLike | None = None) -> dict[str, SeedOutcome]:
    """One seed of branch-and-hold; returns an outcome per Treat arm."""
    out = None if out_dir is None else Path(out_dir)
    arms = spec.arms()
    phase_start = cfg.t0 if spec.kind == "phase_policy" else None
    trails = {"root": _trail(out, index, "root")}
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return _run_seed(index, root_seed, cfg, spec, recipe, data, out, arms, phase_start, trails)
    except (DivergenceError, FloatingPointError) as exc:
        for trail in trails.values():
            if not trail.closed:
                trail.log(trail.records[-1].step if trail.records else 0, "branch_event",
                          {"event": "diverged", "error": str(exc)})
        return {arm: SeedOutcome(index, root_seed, None, None, diverged=True, detail=str(exc)) for arm in arms}
    finally:
        for trail in trails.values():
            trail.close()


def _run_seed(index, root_seed, cfg, spec, recipe, data, out, arms, phase_start, trails):
    t0, W, T = cfg.t0, cfg.W, cfg.T
    root = Run.start(recipe, data, root_seed, trails["root"], phase_start)
    root.train_to(t0)
    record = record_window(root.sampler, W, root.manifest.streams["augment"], t0)
    root.sampler.pending = record.as_pending()
    trails["root"].log(t0, "order_hash", {"scope": "recorded_window", "t0": t0, "W": W, "hash": record.hash,
                                          "aug_hash": record.aug_hash()})
    _write(out, f"order-{t0}-seed{index}.bin", order_record_to_bytes(record))
    base = root.snapshot()
    if spec.kind == "opt_reset" and spec.rewarm_K:
        base = replace(base, schedule=base.schedule.with_rewarm(t0, spec.rewarm_K))
    permute_stream = RngStream("permute", derive_seed(root_seed, "permute"))
    ctrl_snap, treat_snaps, windows = _intervene(base, spec, record, permute_stream)

    branches = {"control": ctrl_snap} | dict(zip(arms, treat_snaps))
    runs: dict[str, Run] = {}
    for i, (name, snap) in enumerate(branches.items()):
        trail = trails[name] = _trail(out, index, name)
        blob = serialize(snap)
        _write(out, f"snapshot-{t0}-seed{index}-{name}.bin", blob)
        if name != "control":
            diff = diff_components(ctrl_snap, snap)
            allowed = spec.intended(i - 1)
            if not diff <= allowed:
                raise IsolationError(f"seed{index} {name}: {sorted(diff - allowed)} changed outside {sorted(allowed)}")
            trail.log(t0, "policy_applied", {"t0": t0, "W": W, "intervention": spec.describe(), "diff": sorted(diff),
                                             "intended": sorted(allowed), "lockstep": spec.lockstep,
                                             "window_hash": windows[i - 1]})
        trail.log(t0, "branch_event", {"event": "fork", "branch": name, "snapshot_sha256": _sha(blob)})
        run = Run.restore(snap, recipe, data, trail, phase_start)
        run.log_norms("t0")
        runs[name] = run

    for run in runs.values():
        run.train_to(t0 + W)
    hashes = {}
    for name, run in runs.items():
        hashes[name] = order_hash(run.take_window())
        run.trail.log(run.step, "order_hash", {"scope": "window", "t0": t0, "W": W, "hash": hashes[name]})
        run.log_norms("t0+W")
    if hashes["control"] != record.hash:
        raise DeterminismError(f"seed{index}: control did not replay the recorded window")
    probe = data.probe
    early = {name: run.evaluate(probe.inputs) for name, run in runs.items()}
    mid = {name: serialize(run.snapshot()) for name, run in runs.items()} if spec.kind == "identity" else None

    for run in runs.values():
        run.train_to(T)
    final = {name: run.evaluate(probe.inputs, recalibrate=cfg.bn_recal) for name, run in runs.items()}
    ends = {}
    for name, run in runs.items():
        ends[name] = serialize(run.snapshot())
        _write(out, f"snapshot-{T}-seed{index}-{name}.bin", ends[name])
        run.trail.log(T, "branch_event", {"event": "end_state", "snapshot_sha256": _sha(ends[name])})

    outcomes = {}
    for arm in arms:
        lock_ok = hashes[arm] == hashes["control"]
        if spec.lockstep and not lock_ok:
            raise DeterminismError(f"seed{index} {arm}: lockstep window hashes differ")
        re = readout(cfg.metric, early["control"], early[arm], probe.targets, recipe.predictive_std)
        rf = readout(cfg.metric, final["control"], final[arm], probe.targets, recipe.predictive_std)
        flags = tuple(sorted(set(re.flags) | set(rf.flags)))
        if spec.kind == "order_swap" and lock_ok:
            flags += ("permutation_identity",)
        if spec.kind == "identity":
            if mid["control"] != mid[arm] or ends["control"] != ends[arm] or re.value != 0 or rf.value != 0:
                raise DeterminismError(f"seed{index}: null intervention changed the trajectory")
        if not (math.isfinite(re.value) and math.isfinite(rf.value)):
            raise DivergenceError(f"seed{index} {arm}: non-finite readout")
        runs[arm].trail.log(T, "branch_event", {"event": "readout", "metric": cfg.metric, "z_early": re.value,
                                                "z_final": rf.value, "flags": list(flags)})
        outcomes[arm] = SeedOutcome(index, root_seed, re.value, rf.value, hashes["control"], hashes[arm], False, flags)
    return outcomes


def _sha(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def branch_and_hold(cfg: BranchConfig, spec: InterventionSpec, recipe: Recipe, data: ExperimentData,
                    out_dir: str | os.PathLike | None = None, jobs: int = 1) -> BranchOutcome:
    if spec.W != cfg.W:
        raise ValueError("intervention W and config W disagree")
    tasks = [(i, s) for i, s in enumerate(cfg.seeds)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_seed, i, s, cfg, spec, recipe, data, out_dir) for i, s in tasks]
            results = [f.result() for f in futures]
    else:
        results = [run_seed(i, s, cfg, spec, recipe, data, out_dir) for i, s in tasks]
    outcome = BranchOutcome(spec, cfg)
    for arm in spec.arms():
        outcome.arms[arm] = [r[arm] for r in results]
    return outcome
