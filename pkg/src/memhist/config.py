"""Experiment spec files: parsing, validation with field paths, canonical digests."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from memhist.audit import canonical_json, config_digest
from memhist.intervene import BranchConfig, InterventionSpec, suggest_window
from memhist.model import ModelSpec, ObjectiveSpec
from memhist.optim import Schedule
from memhist.rng import derive_seed
from memhist.runner import AveragingConfig, DataConfig, OptimizerConfig, Recipe, SamplerConfig
from memhist.stats import DEFAULT_B, READOUTS
from memhist.statekit import POLICY_COMPONENTS, StatePolicy

log = logging.getLogger(__name__)

MIN_SEEDS = 3
RECOMMENDED_SEEDS = 5
ROOT_SEED_ENV = "MEMH_ROOT_SEED"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _build(cls, tree, path: str, **fixed):
    """Construct a dataclass from a mapping, rejecting unknown keys."""
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(path, f"expected a mapping, got {type(tree).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in tree:
        if key not in names:
            raise ConfigError(f"{path}.{key}", "unknown field")
    kwargs = dict(tree) | fixed
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name]) if f.name != "priorities" else kwargs[f.name]
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def _policy(entry, path: str) -> StatePolicy:
    if isinstance(entry, str):
        try:
            return StatePolicy.preset(entry)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from exc
    if not isinstance(entry, dict):
        raise ConfigError(path, "expected a preset name or a mapping")
    entry = dict(entry)
    name = entry.pop("name", None)
    if not name:
        raise ConfigError(f"{path}.name", "required")
    K = entry.pop("rewarm_K", None)
    if set(entry) <= {"preset"} and "preset" in entry:
        try:
            return dataclasses.replace(StatePolicy.preset(entry["preset"], int(K or 0)), name=name)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from exc
    for comp in entry:
        if comp not in POLICY_COMPONENTS:
            raise ConfigError(f"{path}.{comp}", "unknown policy component")
    if K is not None:
        entry = {c: ({"rewarm": K} if a == "rewarm" else a) for c, a in entry.items()}
    try:
        return StatePolicy.from_mapping(entry, name=name)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def parse_recipe(tree: dict, path: str = "recipe") -> Recipe:
    if not isinstance(tree, dict):
        raise ConfigError(path, "expected a mapping")
    known = {f.name for f in dataclasses.fields(Recipe)}
    for key in tree:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
    if "model" not in tree:
        raise ConfigError(f"{path}.model", "required")
    parts = {
        "model": _build(ModelSpec, tree["model"], f"{path}.model"),
        "data": _build(DataConfig, tree.get("data"), f"{path}.data"),
        "objective": _build(ObjectiveSpec, tree.get("objective"), f"{path}.objective"),
        "optimizer": _build(OptimizerConfig, tree.get("optimizer"), f"{path}.optimizer"),
        "schedule": _build(Schedule, tree.get("schedule") or {"base_lr": 0.05}, f"{path}.schedule"),
        "sampler": _build(SamplerConfig, tree.get("sampler"), f"{path}.sampler"),
        "averaging": _build(AveragingConfig, tree.get("averaging"), f"{path}.averaging"),
    }
    if parts["optimizer"].kind not in ("sgd", "adamw"):
        raise ConfigError(f"{path}.optimizer.kind", f"unknown optimizer {parts['optimizer'].kind!r}")
    if tree.get("finetune") is not None:
        parts["finetune"] = _build(DataConfig, tree["finetune"], f"{path}.finetune")
    for key in ("queue_capacity", "augment_noise", "importance_weighting", "eval_weights", "predictive_std"):
        if key in tree:
            parts[key] = tree[key]
    if parts["sampler"].kind not in ("rr", "wr", "prioritized"):
        raise ConfigError(f"{path}.sampler.kind", f"unknown sampler policy {parts['sampler'].kind!r}")
    try:
        parts["sampler"].policy(parts["data"].n)
    except ValueError as exc:
        raise ConfigError(f"{path}.sampler", str(exc)) from exc
    if parts["sampler"].batch_size > parts["data"].n:
        raise ConfigError(f"{path}.sampler.batch_size", "exceeds data.n")
    q = parts.get("queue_capacity")
    if q is not None and (not isinstance(q, int) or q < 1):
        raise ConfigError(f"{path}.queue_capacity", "must be a positive integer")
    if parts["model"].input_dim != parts["data"].input_dim:
        raise ConfigError(f"{path}.model.input_dim", "must match data.input_dim")
    try:
        return Recipe(**parts)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def window_context(recipe: Recipe, kind: str, iv: dict) -> dict:
    epoch = -(-recipe.data.n // recipe.sampler.batch_size)
    opt = recipe.optimizer
    return {"beta": opt.beta1 if opt.kind == "adamw" else opt.beta, "sampler": recipe.sampler.kind,
            "epoch_length": epoch, "alpha": recipe.averaging.teacher, "K": recipe.queue_capacity,
            "B": recipe.sampler.batch_size, "k_epochs": iv.get("k_epochs", 1)}


def parse_intervention(tree: dict, W: int, path: str = "intervention") -> InterventionSpec:
    if not isinstance(tree, dict) or "kind" not in tree:
        raise ConfigError(f"{path}.kind", "required")
    tree = dict(tree)
    if "policies" in tree:
        if not isinstance(tree["policies"], list):
            raise ConfigError(f"{path}.policies", "expected a list")
        tree["policies"] = tuple(_policy(p, f"{path}.policies[{i}]") for i, p in enumerate(tree["policies"]))
    tree.pop("W", None)
    return _build(InterventionSpec, tree, path, W=W)


@dataclass(frozen=True, eq=False)
class Experiment:
    config: dict  # resolved tree; spec.json is its canonical form
    root_seed: int
    root_seed_source: str
    recipe: Recipe
    intervention: InterventionSpec
    branch: BranchConfig
    bootstrap_B: int
    epsilon: float | None
    alpha: float

    @property
    def canonical(self) -> str:
        return canonical_json(self.config) + "\n"

    @property
    def digest(self) -> str:
        return config_digest(self.config)

    @property
    def n_seeds(self) -> int:
        return len(self.branch.seeds)


def seed_roots(root_seed: int, count: int) -> tuple[int, ...]:
    return tuple(derive_seed(root_seed, f"seed{i}") for i in range(count))


CFG_KEYS = ("t0", "W", "T", "seeds", "metric", "bn_recal", "bootstrap_B", "epsilon", "alpha")


def parse_experiment(tree: dict, overrides: dict | None = None, env: dict | None = None) -> Experiment:
    """Validate a spec tree. ``overrides`` replace cfg fields (CLI flags)."""
    if not isinstance(tree, dict):
        raise ConfigError("", "spec must be a mapping")
    for key in tree:
        if key not in ("root_seed", "recipe", "intervention", "cfg"):
            raise ConfigError(key, "unknown field")
    env = os.environ if env is None else env
    root_seed = tree.get("root_seed", 0)
    source = "spec"
    if env.get(ROOT_SEED_ENV):
        try:
            root_seed = int(env[ROOT_SEED_ENV], 0)
        except ValueError as exc:
            raise ConfigError(ROOT_SEED_ENV, "must be an integer") from exc
        source = f"env:{ROOT_SEED_ENV}"
    if not isinstance(root_seed, int) or not 0 <= root_seed < 2**64:
        raise ConfigError("root_seed", "must be an unsigned 64-bit integer")
    recipe = parse_recipe(tree.get("recipe"), "recipe")
    cfg = dict(tree.get("cfg") or {})
    for key in cfg:
        if key not in CFG_KEYS:
            raise ConfigError(f"cfg.{key}", "unknown field")
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    iv_tree = tree.get("intervention")
    if not isinstance(iv_tree, dict):
        raise ConfigError("intervention", "required mapping")
    W = cfg.get("W", "auto")
    if W == "auto":
        try:
            W = suggest_window(iv_tree.get("kind"), **window_context(recipe, iv_tree.get("kind"), iv_tree))
        except ValueError as exc:
            raise ConfigError("cfg.W", f"cannot derive window: {exc}") from exc
    if isinstance(W, bool) or not isinstance(W, int) or W < 1:
        raise ConfigError("cfg.W", "must be a positive integer or 'auto'")
    spec = parse_intervention(iv_tree, W)
    for key in ("t0", "T"):
        if key not in cfg:
            raise ConfigError(f"cfg.{key}", "required")
        if isinstance(cfg[key], bool) or not isinstance(cfg[key], int) or cfg[key] < 0:
            raise ConfigError(f"cfg.{key}", "must be a non-negative integer")
    t0, T = cfg["t0"], cfg["T"]
    if not t0 + W <= T:
        raise ConfigError("cfg.T", f"must be >= t0 + W = {t0 + W}")
    seeds = cfg.get("seeds", RECOMMENDED_SEEDS)
    if isinstance(seeds, bool) or not isinstance(seeds, int) or seeds < MIN_SEEDS:
        raise ConfigError("cfg.seeds", f"must be an integer >= {MIN_SEEDS}")
    if seeds < RECOMMENDED_SEEDS:
        log.warning("cfg.seeds=%d is below the recommended minimum of %d seeds", seeds, RECOMMENDED_SEEDS)
    metric = cfg.get("metric", "tv")
    if metric not in READOUTS:
        raise ConfigError("cfg.metric", f"must be one of {', '.join(READOUTS)}")
    if metric in ("disagreement", "acc", "ece", "nll") and not recipe.model.classifies:
        raise ConfigError("cfg.metric", f"{metric} needs a classification model")
    B = cfg.get("bootstrap_B", DEFAULT_B)
    if isinstance(B, bool) or not isinstance(B, int) or B < 1:
        raise ConfigError("cfg.bootstrap_B", "must be a positive integer")
    eps = cfg.get("epsilon")
    if eps is not None and not (isinstance(eps, (int, float)) and eps > 0):
        raise ConfigError("cfg.epsilon", "must be positive")
    alpha = cfg.get("alpha", 0.05)
    if not (isinstance(alpha, (int, float)) and 0 < alpha < 0.5):
        raise ConfigError("cfg.alpha", "must lie in (0, 0.5)")
    bn_recal = bool(cfg.get("bn_recal", False))
    branch = BranchConfig(t0, W, T, seed_roots(root_seed, seeds), metric, bn_recal)
    resolved = {"root_seed": root_seed, "recipe": dataclasses.asdict(recipe), "intervention": dataclasses.asdict(spec),
                "cfg": {"t0": t0, "W": W, "T": T, "seeds": seeds, "metric": metric, "bn_recal": bn_recal,
                        "bootstrap_B": B, "epsilon": eps, "alpha": alpha}}
    # round-trip through canonical JSON so the digest covers exactly what is stored
    resolved = json.loads(canonical_json(resolved))
    return Experiment(resolved, root_seed, source, recipe, spec, branch, B,
                      None if eps is None else float(eps), float(alpha))


def load_tree(path: str | os.PathLike) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        if str(path).endswith(".json"):
            return json.loads(text)
        return yaml.safe_load(text)
    except (yaml.YAMLError, ValueError) as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc


def load_experiment(path: str | os.PathLike, overrides: dict | None = None) -> Experiment:
    return parse_experiment(load_tree(path), overrides)
