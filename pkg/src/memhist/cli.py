"""Command-line front end: run, replay, verify, report, stats, window."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from memhist.audit import emit_report, read_effects, verify
from memhist.config import ROOT_SEED_ENV, ConfigError, load_experiment
from memhist.intervene import KINDS, DeterminismError, IsolationError, suggest_window
from memhist.stats import DEFAULT_B, READOUTS, significant, tost, paired_ate_ci

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_VERIFY = 3
EXIT_DIVERGED = 4


def _ci_line(label: str, est) -> str:
    return (f"{label}: ate={est.ate:.4f}, CI=[{est.ci_lo:.4f}, {est.ci_hi:.4f}], "
            f"width={significant(est.ci_width)}, B={est.B}")


def _tost_lines(eq) -> list[str]:
    return [f"TOST: mean_delta={eq.mean_delta:.6g}, s={eq.s:.6g}, n={eq.n}, epsilon={eq.epsilon:g}, alpha={eq.alpha:g}",
            f"      p_lower={eq.p_lower:.6g}, p_upper={eq.p_upper:.6g}, "
            f"{100 * (1 - 2 * eq.alpha):g}% CI=[{eq.ci_1m2a[0]:.6g}, {eq.ci_1m2a[1]:.6g}]",
            f"      decision: {'equivalent' if eq.equivalent else 'not equivalent'}"]


def cmd_run(args) -> int:
    from memhist.experiment import run_experiment

    overrides = {"seeds": args.seeds, "bootstrap_B": args.bootstrap_B, "epsilon": args.epsilon, "alpha": args.alpha,
                 "metric": args.metric, "bn_recal": True if args.bn_recal else None}
    try:
        exp = load_experiment(args.spec, overrides)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if exp.root_seed_source != "spec":
        print(f"root seed {exp.root_seed} from {ROOT_SEED_ENV}")
    try:
        result = run_experiment(exp, args.out_dir, args.jobs)
    except (IsolationError, DeterminismError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    for summary in result.arms.values():
        prefix = f"[{summary.arm}] " if len(result.arms) > 1 else ""
        if summary.early is None:
            print(f"{prefix}no seed finished; nothing to estimate")
            continue
        print(prefix + _ci_line("early", summary.early))
        print(prefix + _ci_line("final", summary.final))
        if summary.equivalence is not None:
            print("\n".join(prefix + line for line in _tost_lines(summary.equivalence)))
        elif summary.tost_error:
            print(f"{prefix}TOST refused: {summary.tost_error}")
        if summary.excluded:
            print(f"{prefix}diverged seeds excluded: {', '.join(map(str, summary.excluded))}")
    print(f"run directory: {args.out_dir}")
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def cmd_replay(args) -> int:
    from memhist.experiment import replay

    result = replay(args.run_dir, args.jobs)
    print(("PASS " if result.ok else "FAIL ") + result.message)
    return EXIT_OK if result.ok else EXIT_VERIFY


def cmd_verify(args) -> int:
    report = verify(args.run_dir)
    print(report.render())
    print("verification " + ("passed" if report.ok else f"failed ({len(report.failures())} checks)"))
    return EXIT_OK if report.ok else EXIT_VERIFY


def cmd_report(args) -> int:
    if not Path(args.run_dir).is_dir():
        print(f"error: {args.run_dir} is not a directory", file=sys.stderr)
        return EXIT_VALIDATION
    text = emit_report(args.run_dir)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _boot_seed(effects_path: Path, explicit: int | None) -> int:
    from memhist.rng import derive_seed

    if explicit is not None:
        return derive_seed(explicit, "boot")
    spec = effects_path.parent / "spec.json"
    root = 0
    if spec.exists():
        root = json.loads(spec.read_text(encoding="utf-8")).get("root_seed", 0)
    if os.environ.get(ROOT_SEED_ENV):
        root = int(os.environ[ROOT_SEED_ENV], 0)
    return derive_seed(root, "boot")


def cmd_stats(args) -> int:
    from memhist.rng import RngStream

    path = Path(args.effects)
    try:
        rows, _ = read_effects(path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if not rows:
        print(f"error: {path}: no per-seed rows", file=sys.stderr)
        return EXIT_VALIDATION
    B = args.bootstrap_B or DEFAULT_B
    seed = _boot_seed(path, args.root_seed)
    for label, col in (("early", 1), ("final", 2)):
        est = paired_ate_ci([r[col] for r in rows], B, RngStream("boot", seed))
        print(_ci_line(label, est))
    if args.epsilon is not None:
        deltas = [r[1 if args.column == "early" else 2] for r in rows]
        if len(deltas) < 2:
            print(f"TOST refused: {len(deltas)} seed(s) gives df = n - 1 = {len(deltas) - 1}; "
                  "the t-based test needs at least 2 seeds", file=sys.stderr)
            return EXIT_VALIDATION
        try:
            eq = tost(deltas, args.epsilon, args.alpha)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"TOST on z_{args.column}")
        print("\n".join(_tost_lines(eq)))
    return EXIT_OK


def cmd_window(args) -> int:
    ctx = {"beta": args.beta, "beta1": args.beta1, "alpha": args.teacher_alpha, "K": args.K, "B": args.B,
           "epoch_length": args.epoch_length, "sampler": args.sampler, "k_epochs": args.k_epochs}
    try:
        W = suggest_window(args.intervention, **{k: v for k, v in ctx.items() if v is not None})
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(W)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="memhist", description="Branch-and-hold attribution of training-history effects.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment spec into a run directory")
    r.add_argument("spec")
    r.add_argument("out_dir")
    r.add_argument("--seeds", type=int)
    r.add_argument("--bootstrap-B", type=int, dest="bootstrap_B")
    r.add_argument("--epsilon", type=float)
    r.add_argument("--alpha", type=float)
    r.add_argument("--metric", choices=READOUTS)
    r.add_argument("--bn-recal", action="store_true")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("replay", help="re-execute a run and compare its artifacts")
    rp.add_argument("run_dir")
    rp.add_argument("--jobs", type=int, default=1)
    rp.set_defaults(func=cmd_replay)

    v = sub.add_parser("verify", help="check hashes, chains and isolation of a run directory")
    v.add_argument("run_dir")
    v.set_defaults(func=cmd_verify)

    rep = sub.add_parser("report", help="emit the reporting checklist for a run directory")
    rep.add_argument("run_dir")
    rep.add_argument("-o", "--output")
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("stats", help="ATE, bootstrap CI and optional TOST from an effects table")
    s.add_argument("effects")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--bootstrap-B", type=int, dest="bootstrap_B")
    s.add_argument("--column", choices=("early", "final"), default="final")
    s.add_argument("--root-seed", type=int)
    s.set_defaults(func=cmd_stats)

    w = sub.add_parser("window", help="suggest a window length W for an intervention")
    w.add_argument("intervention", choices=[k for k in KINDS if k != "identity"])
    w.add_argument("--beta", type=float)
    w.add_argument("--beta1", type=float)
    w.add_argument("--teacher-alpha", type=float)
    w.add_argument("--K", type=int)
    w.add_argument("--B", type=int)
    w.add_argument("--epoch-length", type=int)
    w.add_argument("--sampler", choices=("rr", "wr", "prioritized"))
    w.add_argument("--k-epochs", type=int)
    w.set_defaults(func=cmd_window)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
