"""End-to-end experiments: run directories, effect tables and replay."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from memhist.audit import RunManifest, emit_report, parse_trail, substrate_note
from memhist.config import Experiment, parse_experiment
from memhist.intervene import BranchOutcome, branch_and_hold
from memhist.rng import RngStream, canonical_manifest, derive_seed
from memhist.runner import build_data
from memhist.sampler import RecordIntegrityError, order_record_from_bytes
from memhist.stats import EffectEstimate, EquivalenceResult, paired_ate_ci, significant, tost
from memhist.statekit import SnapshotFormatError, deserialize, diff_components

EFFECTS_HEADER = "seed\tz_early\tz_final"


@dataclass
class ArmSummary:
    arm: str
    rows: list[tuple[int, float, float]]
    excluded: list[int]
    early: EffectEstimate | None
    final: EffectEstimate | None
    equivalence: EquivalenceResult | None = None
    tost_error: str = ""


@dataclass
class ExperimentResult:
    experiment: Experiment
    outcome: BranchOutcome
    arms: dict[str, ArmSummary] = field(default_factory=dict)

    @property
    def primary(self) -> ArmSummary:
        return next(iter(self.arms.values()))

    @property
    def diverged(self) -> bool:
        return any(a.excluded for a in self.arms.values())


def boot_stream(root_seed: int) -> RngStream:
    return RngStream("boot", derive_seed(root_seed, "boot"))


def summarize(exp: Experiment, outcome: BranchOutcome) -> dict[str, ArmSummary]:
    out = {}
    for arm, seeds in outcome.arms.items():
        rows = [(s.index, s.z_early, s.z_final) for s in seeds if not s.diverged]
        excluded = [s.index for s in seeds if s.diverged]
        early = final = eq = None
        err = ""
        if rows:
            early = paired_ate_ci([r[1] for r in rows], exp.bootstrap_B, boot_stream(exp.root_seed))
            final = paired_ate_ci([r[2] for r in rows], exp.bootstrap_B, boot_stream(exp.root_seed))
        if exp.epsilon is not None:
            if len(rows) < 2:
                err = f"TOST needs at least 2 non-diverged seeds for df = n - 1 >= 1 (got {len(rows)})"
            else:
                eq = tost([r[2] for r in rows], exp.epsilon, exp.alpha)
        out[arm] = ArmSummary(arm, rows, excluded, early, final, eq, err)
    return out


def _g(x: float) -> str:
    return repr(float(x))


def effects_text(summary: ArmSummary, B: int) -> str:
    lines = [EFFECTS_HEADER]
    lines += [f"{seed}\t{_g(ze)}\t{_g(zf)}" for seed, ze, zf in summary.rows]
    lines.append("# summary")
    for tag, est in (("early", summary.early), ("final", summary.final)):
        if est is None:
            lines.append(f"ate_{tag}\tnot computed")
            continue
        lines += [f"ate_{tag}\t{_g(est.ate)}", f"ci_lo_{tag}\t{_g(est.ci_lo)}", f"ci_hi_{tag}\t{_g(est.ci_hi)}",
                  f"ci_width_{tag}\t{significant(est.ci_width)}"]
    lines.append(f"B\t{B}")
    lines.append(f"excluded_seeds\t{','.join(map(str, summary.excluded)) or 'none'}")
    eq = summary.equivalence
    if eq is not None:
        lines += [f"epsilon\t{_g(eq.epsilon)}", f"alpha\t{_g(eq.alpha)}", f"tost_mean\t{_g(eq.mean_delta)}",
                  f"tost_s\t{_g(eq.s)}", f"tost_n\t{eq.n}", f"tost_p_lower\t{_g(eq.p_lower)}",
                  f"tost_p_upper\t{_g(eq.p_upper)}", f"tost_ci_lo\t{_g(eq.ci_1m2a[0])}",
                  f"tost_ci_hi\t{_g(eq.ci_1m2a[1])}", f"tost_equivalent\t{str(eq.equivalent).lower()}"]
    elif summary.tost_error:
        lines.append(f"tost\trefused: {summary.tost_error}")
    return "\n".join(lines) + "\n"


def manifest_for(exp: Experiment) -> RunManifest:
    r = exp.recipe
    summary = (f"{r.model.kind} {r.data.task} n={r.data.n} {r.optimizer.kind} sampler={r.sampler.kind}/"
               f"{r.sampler.batch_size} intervention={exp.intervention.kind} W={exp.intervention.W}")
    streams = {f"seed{i}": [(name, seed) for name, seed, _ in canonical_manifest(s).records()]
               for i, s in enumerate(exp.branch.seeds)}
    return RunManifest(exp.root_seed, exp.digest, summary, substrate_note(), streams, exp.root_seed_source)


def run_experiment(exp: Experiment, out_dir: str | os.PathLike | None = None, jobs: int = 1) -> ExperimentResult:
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "spec.json").write_text(exp.canonical, encoding="utf-8", newline="\n")
        (out / "manifest.txt").write_text(manifest_for(exp).to_text(), encoding="utf-8", newline="\n")
    data = build_data(exp.recipe, exp.root_seed)
    outcome = branch_and_hold(exp.branch, exp.intervention, exp.recipe, data, out, jobs)
    result = ExperimentResult(exp, outcome, summarize(exp, outcome))
    if out is not None:
        arms = list(result.arms.values())
        (out / "effects.tsv").write_text(effects_text(arms[0], exp.bootstrap_B), encoding="utf-8", newline="\n")
        if len(arms) > 1:
            for a in arms:
                (out / f"effects-{a.arm}.tsv").write_text(effects_text(a, exp.bootstrap_B), encoding="utf-8", newline="\n")
        (out / "report.md").write_text(emit_report(out), encoding="utf-8", newline="\n")
    return result


@dataclass
class ReplayReport:
    ok: bool
    message: str


def replay(run_dir: str | os.PathLike, jobs: int = 1) -> ReplayReport:
    """Re-execute a run from its stored spec and compare every artifact."""
    root = Path(run_dir)
    for trail in sorted(root.glob("trail-*.log")):
        _, problems = parse_trail(trail.read_text(encoding="utf-8", errors="replace"))
        if problems:
            return ReplayReport(False, f"{trail.name}: chain-hash check failed: {problems[0]}")
    try:
        exp = parse_experiment(json.loads((root / "spec.json").read_text(encoding="utf-8")))
    except (OSError, ValueError) as exc:
        return ReplayReport(False, f"spec.json: {exc}")
    with tempfile.TemporaryDirectory() as tmp:
        run_experiment(exp, tmp, jobs)
        fresh = Path(tmp)
        t0, T = exp.branch.t0, exp.branch.T
        for i in range(exp.n_seeds):
            name = f"order-{t0}-seed{i}.bin"
            try:
                stored = order_record_from_bytes((root / name).read_bytes())
            except (OSError, RecordIntegrityError) as exc:
                return ReplayReport(False, f"{name}: {exc}")
            again = order_record_from_bytes((fresh / name).read_bytes())
            if stored.hash != again.hash:
                return ReplayReport(False, f"seed{i}: order hash differs at step {t0} (component sampler)")
            for step in (t0, T):
                for path in sorted(fresh.glob(f"snapshot-{step}-seed{i}-*.bin")):
                    old = root / path.name
                    try:
                        old_bytes = old.read_bytes()
                        deserialize(old_bytes)
                    except (OSError, SnapshotFormatError, ValueError) as exc:
                        return ReplayReport(False, f"{path.name}: {exc}")
                    new_bytes = path.read_bytes()
                    if old_bytes != new_bytes:
                        diff = sorted(diff_components(old_bytes, new_bytes)) or ["meta"]
                        return ReplayReport(False, f"seed{i}: {path.name} differs at step {step} (components {', '.join(diff)})")
        for path in sorted(fresh.glob("effects*.tsv")):
            old = root / path.name
            if not old.exists() or old.read_bytes() != path.read_bytes():
                return ReplayReport(False, f"{path.name} differs from the stored table")
    return ReplayReport(True, f"replay matched {exp.n_seeds} seeds at steps {t0} and {T}")
