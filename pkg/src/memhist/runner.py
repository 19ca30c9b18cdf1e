"""Training recipes and the live, single-owner training run."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from memhist.model import (
    Dataset, ModelSpec, NormState, ObjectiveSpec, PredictiveOutput, Probe, embed, forward, init_model,
    loss_and_grad, make_task_data,
)
from memhist.optim import (
    AveragingState, Schedule, adamw, averaging_update, init_averaging, sgd_momentum, step as opt_step, swa_finalize,
)
from memhist.rng import RngManifest, canonical_manifest
from memhist.sampler import SamplerPolicy, SamplerState, importance_weights, next_step_batch, order_hash
from memhist.statekit import QueueState, Snapshot, bn_recalibrate, component_checksum, queue_fingerprint, queue_step

NORM_LOG_EVERY = 100


@dataclass(frozen=True)
class DataConfig:
    task: str = "regress"
    n: int = 512
    input_dim: int = 8
    noise: float = 0.5
    n_classes: int = 2
    output_dim: int = 1
    separation: float = 3.0
    probe_size: int = 256
    calib_size: int | None = None  # rows used for norm recalibration; None = all


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def init(self, params):
        if self.kind == "sgd":
            return sgd_momentum(params, self.beta)
        if self.kind == "adamw":
            return adamw(params, self.beta1, self.beta2, self.eps, self.weight_decay)
        raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "rr"
    batch_size: int = 32
    priorities: object = "uniform"  # "uniform", list of reals, or {"power": p} for (i+1)^p
    renormalize_every: int = 1

    def priority_vector(self, n: int) -> np.ndarray | None:
        if self.kind != "prioritized":
            return None
        spec = self.priorities
        if spec == "uniform":
            return np.ones(n)
        if isinstance(spec, dict) and "power" in spec:
            return (np.arange(n) + 1.0) ** float(spec["power"])
        p = np.asarray(spec, dtype=np.float64)
        if len(p) != n:
            raise ValueError(f"expected {n} priorities, got {len(p)}")
        return p

    def policy(self, n: int) -> SamplerPolicy:
        return SamplerPolicy(self.kind, self.batch_size, self.priority_vector(n), self.renormalize_every)


@dataclass(frozen=True)
class AveragingConfig:
    ema: float | None = None
    swa: bool = False
    swa_start: int = 0
    teacher: float | None = None


@dataclass(frozen=True)
class Recipe:
    model: ModelSpec
    data: DataConfig = DataConfig()
    objective: ObjectiveSpec = ObjectiveSpec()
    optimizer: OptimizerConfig = OptimizerConfig()
    schedule: Schedule = Schedule(0.05)
    sampler: SamplerConfig = SamplerConfig()
    averaging: AveragingConfig = AveragingConfig()
    queue_capacity: int | None = None
    augment_noise: float = 0.0
    importance_weighting: bool = False
    eval_weights: str = "params"  # params | ema | swa | teacher
    predictive_std: float = 1.0  # Gaussian width for regression readouts
    finetune: DataConfig | None = None  # data used from the phase boundary on

    def __post_init__(self):
        if self.objective.kind == "teacher_consistency" and self.averaging.teacher is None:
            raise ValueError("teacher_consistency objective needs averaging.teacher")
        if self.objective.kind == "contrastive" and self.model.classifies:
            raise ValueError("contrastive objective needs an identity-head model")
        if self.eval_weights not in ("params", "ema", "swa", "teacher"):
            raise ValueError(f"unknown eval_weights {self.eval_weights!r}")
        if self.eval_weights != "params" and getattr(self.averaging, self.eval_weights) in (None, False):
            raise ValueError(f"eval_weights={self.eval_weights} but that average is not configured")
        if self.predictive_std <= 0:
            raise ValueError("predictive_std must be positive")


@dataclass(frozen=True, eq=False)
class ExperimentData:
    train: Dataset
    probe: Probe
    finetune: Dataset | None = None

    def calib(self, recipe: Recipe, t: int | None = None, phase_start: int | None = None) -> np.ndarray:
        data = self.for_step(t, phase_start)
        size = recipe.data.calib_size or data.n
        return data.inputs[:size]

    def for_step(self, t: int | None, phase_start: int | None) -> Dataset:
        if self.finetune is not None and phase_start is not None and t is not None and t >= phase_start:
            return self.finetune
        return self.train


def build_data(recipe: Recipe, data_seed: int) -> ExperimentData:
    """Experiment-wide data and probe; identical for every seed and branch."""
    manifest = RngManifest(data_seed)
    d = recipe.data
    train, probe = make_task_data(d.task, d.n, d.probe_size, d.input_dim, d.noise, manifest.derive("data"),
                                  n_classes=d.n_classes, output_dim=d.output_dim, separation=d.separation)
    finetune = None
    if recipe.finetune is not None:
        f = recipe.finetune
        if f.n != d.n:
            raise ValueError("finetune data must keep the dataset size")
        finetune, _ = make_task_data(f.task, f.n, 0, f.input_dim, f.noise, manifest.derive("finetune"),
                                     n_classes=f.n_classes, output_dim=f.output_dim, separation=f.separation)
    if recipe.model.input_dim != d.input_dim:
        raise ValueError("model.input_dim must match data.input_dim")
    if recipe.model.classifies and d.task == "classify" and recipe.model.output_dim != d.n_classes:
        raise ValueError("classifier output_dim must match data.n_classes")
    if d.task in ("regress", "teacher_consistency") and recipe.model.output_dim != d.output_dim:
        raise ValueError("regression output_dim must match data.output_dim")
    return ExperimentData(train, probe, finetune)


@dataclass
class Run:
    """A live run: owns its state and mutates it one step at a time."""

    recipe: Recipe
    data: ExperimentData
    step: int
    params: object
    opt: object
    avg: AveragingState
    norm: NormState
    sampler: SamplerState
    queue: QueueState | None
    manifest: RngManifest
    schedule: Schedule
    trail: object = None
    phase_start: int | None = None
    window: list = field(default_factory=list)
    block: list = field(default_factory=list)

    @classmethod
    def start(cls, recipe: Recipe, data: ExperimentData, root_seed: int, trail=None, phase_start=None) -> "Run":
        manifest = canonical_manifest(root_seed)
        if trail is not None:
            for name, seed, _ in manifest.records():
                trail.log(0, "stream_derived", {"name": name, "seed": seed})
        params = init_model(recipe.model, manifest.streams["init"])
        a = recipe.averaging
        avg = init_averaging(params, a.ema, a.swa, a.swa_start, a.teacher)
        sampler = SamplerState(recipe.sampler.policy(recipe.data.n), recipe.data.n, manifest.streams["order"])
        queue = QueueState(recipe.queue_capacity) if recipe.queue_capacity else None
        run = cls(recipe, data, 0, params, recipe.optimizer.init(params), avg, NormState.fresh(recipe.model),
                  sampler, queue, manifest, recipe.schedule, trail, phase_start)
        run.log_norms()
        return run

    # -- state as a value ------------------------------------------------------

    def snapshot(self) -> Snapshot:
        return Snapshot.capture(self.step, self.params, self.opt, self.avg, self.norm, self.sampler, self.queue,
                                self.manifest, self.schedule)

    @classmethod
    def restore(cls, snap: Snapshot, recipe: Recipe, data: ExperimentData, trail=None, phase_start=None) -> "Run":
        manifest = snap.manifest.copy()
        sampler = snap.sampler.copy(stream=manifest.streams[snap.sampler.stream.name])
        return cls(recipe, data, snap.step, snap.params, snap.opt, snap.avg, snap.norm, sampler, snap.queue,
                   manifest, snap.schedule, trail, phase_start)

    # -- training ---------------------------------------------------------------

    def train_step(self):
        r = self.recipe
        t = self.step
        data = self.data.for_step(t, self.phase_start)
        drawn_ids, aug = next_step_batch(self.sampler, self.manifest.streams["augment"])
        self.window.append(drawn_ids.copy())
        self.block.append(drawn_ids.copy())
        # canonical intra-batch order: batch gradients are independent of draw order
        order = np.lexsort((aug, drawn_ids))
        ids, aug = drawn_ids[order], aug[order]
        weights = None
        if r.importance_weighting and self.sampler.probs is not None:
            weights = importance_weights(ids, self.sampler.probs, data.n)
        batch = data.batch(ids, r.augment_noise, aug, weights)
        teacher = self.avg.teacher.weights if self.avg.teacher is not None else None
        use_queue = r.objective.kind == "contrastive" and self.queue is not None
        negatives = self.queue.matrix() if use_queue and len(self.queue) else None
        _, grad, new_norm = loss_and_grad(r.model, self.params, batch, self.norm, r.objective, teacher, negatives)
        keys = embed(r.model, self.params, batch.pairs, self.norm) if use_queue and not self.queue.frozen else None
        self.params, self.opt = opt_step(self.params, grad, self.opt, self.schedule, t)
        self.norm = new_norm
        self.avg = averaging_update(self.avg, self.params, t)
        if keys is not None:
            self.queue = queue_step(self.queue, keys, t)
        self.step = t + 1
        self._release_holds()
        self._log_after_step()

    def train_to(self, T: int):
        while self.step < T:
            self.train_step()

    def _release_holds(self):
        t = self.step
        avg = self.avg
        for name in ("ema", "teacher"):
            ema = getattr(avg, name)
            if ema is not None and ema.thaw_at is not None and ema.thaw_at <= t:
                alpha = ema.restore_alpha if ema.restore_alpha is not None else ema.alpha
                avg = replace(avg, **{name: replace(ema, frozen=False, thaw_at=None, restore_alpha=None, alpha=alpha)})
        if avg.swa is not None and avg.swa.thaw_at is not None and avg.swa.thaw_at <= t:
            avg = replace(avg, swa=replace(avg.swa, frozen=False, thaw_at=None))
        self.avg = avg
        if self.queue is not None and self.queue.thaw_at is not None and self.queue.thaw_at <= t:
            self.queue = replace(self.queue, frozen=False, thaw_at=None)

    # -- audit hooks ------------------------------------------------------------

    def take_window(self) -> list:
        out, self.window = self.window, []
        return out

    def _log_after_step(self):
        trail = self.trail
        if trail is None:
            return
        t = self.step
        for name in ("ema", "teacher"):
            ema = getattr(self.avg, name)
            if ema is not None:
                trail.log(t, "ema_decay", {"which": name, "alpha": ema.alpha, "frozen": ema.frozen})
        if t % self.sampler.steps_per_epoch == 0 and self.block:
            trail.log(t, "order_hash", {"scope": "epoch_block", "end": t, "batches": len(self.block),
                                        "hash": order_hash(self.block)})
            self.block = []
        if t % NORM_LOG_EVERY == 0:
            self.log_norms()

    def log_norms(self, tag: str = "cadence"):
        if self.trail is None:
            return
        snap = self.snapshot()
        opt = component_checksum(snap, "optimizer")
        self.trail.log(self.step, "buffer_norms", {"tag": tag, "norms": opt.norms, "theta": self.params.norm()})
        if self.norm.layers:
            self.trail.log(self.step, "bn_checksum", {"tag": tag, "digest": component_checksum(snap, "bn").digest})
        if self.queue is not None:
            self.trail.log(self.step, "queue_fingerprint", {"tag": tag, "size": len(self.queue),
                                                            "digest": queue_fingerprint(self.queue)})

    # -- evaluation ---------------------------------------------------------------

    def eval_weights(self):
        which = self.recipe.eval_weights
        if which == "params":
            return self.params
        if which == "swa":
            return swa_finalize(self.avg, self.recipe.model)[0]
        return getattr(self.avg, which).weights

    def evaluate(self, inputs, recalibrate: bool = False) -> PredictiveOutput:
        weights = self.eval_weights()
        norm = self.norm
        if recalibrate and self.recipe.model.norm:
            norm = bn_recalibrate(self.recipe.model, weights, norm, self.data.calib(self.recipe, self.step, self.phase_start))
        return forward(self.recipe.model, weights, inputs, norm, "eval")
