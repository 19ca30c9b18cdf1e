"""Hash-chained audit trails, run manifests, artifact verification and reporting."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_KINDS = ("order_hash", "buffer_norms", "bn_checksum", "queue_fingerprint", "ema_decay", "policy_applied",
                "stream_derived", "branch_event")
GENESIS = hashlib.sha256(b"").digest()
NOT_RECORDED = "NOT RECORDED"
REPORT_SECTIONS = ("Datasets", "Architectures", "Seeds & randomness", "Sampler policy", "Optimizer & meta-state",
                   "Schedules", "Transforms / preprocessing", "Compute budget", "Probe", "Metrics", "Uncertainty",
                   "Artifacts")


class TrailError(ValueError):
    pass


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    step: int
    kind: str
    payload: dict

    def body(self) -> bytes:
        return f"{self.seq}\t{self.step}\t{self.kind}\t{canonical_json(self.payload)}".encode("utf-8")


class AuditTrail:
    """Append-only record list; h_i = SHA-256(h_{i-1} || record_i bytes).

    With a path, each record is written as one line:
    ``seq  step  kind  payload-json  record-sha256  chain-sha256`` (tab separated).
    ``close`` appends an end marker so truncation is detectable.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.records: list[AuditRecord] = []
        self.head = GENESIS
        self._fh = open(path, "w", encoding="utf-8", newline="\n") if path is not None else None
        self.closed = False

    def log(self, step: int, kind: str, payload: dict) -> AuditRecord:
        if self.closed:
            raise TrailError("trail is closed")
        if kind not in RECORD_KINDS:
            raise TrailError(f"unknown record kind {kind!r}")
        if self.records and step < self.records[-1].step:
            raise TrailError(f"out-of-order step {step} after {self.records[-1].step}")
        rec = AuditRecord(len(self.records), int(step), kind, _jsonable(payload))
        body = rec.body()
        self.head = hashlib.sha256(self.head + body).digest()
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(f"{body.decode('utf-8')}\t{hashlib.sha256(body).hexdigest()}\t{self.head.hex()}\n")
        return rec

    def close(self):
        if self.closed:
            return
        step = self.records[-1].step if self.records else 0
        self.log(step, "branch_event", {"event": "end", "records": len(self.records)})
        self.closed = True
        if self._fh is not None:
            self._fh.close()

    def find(self, kind: str, **match) -> list[AuditRecord]:
        return [r for r in self.records if r.kind == kind and all(r.payload.get(k) == v for k, v in match.items())]


def parse_trail(text: str) -> tuple[list[AuditRecord], list[str]]:
    """Records of a trail file plus every integrity problem found."""
    problems: list[str] = []
    records: list[AuditRecord] = []
    head = GENESIS
    last_step = None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        problems.append("trail does not end with a newline")
    for lineno, line in enumerate(lines, 1):
        parts = line.split("\t")
        if len(parts) != 6:
            problems.append(f"line {lineno}: malformed record")
            break
        seq, step, kind, payload, rec_sha, chain = parts
        body = "\t".join(parts[:4]).encode("utf-8")
        if hashlib.sha256(body).hexdigest() != rec_sha:
            problems.append(f"line {lineno}: record checksum mismatch")
        head = hashlib.sha256(head + body).digest()
        if head.hex() != chain:
            problems.append(f"line {lineno}: chain hash mismatch")
            break
        try:
            rec = AuditRecord(int(seq), int(step), kind, json.loads(payload))
        except ValueError:
            problems.append(f"line {lineno}: unparseable record")
            break
        if rec.seq != len(records):
            problems.append(f"line {lineno}: sequence gap")
        if last_step is not None and rec.step < last_step:
            problems.append(f"line {lineno}: out-of-order step")
        last_step = rec.step
        records.append(rec)
    if not problems:
        if not records or records[-1].kind != "branch_event" or records[-1].payload.get("event") != "end":
            problems.append("trail truncated: end marker missing")
        elif records[-1].payload.get("records") != len(records) - 1:
            problems.append("trail truncated: record count mismatch")
    return records, problems


# --------------------------------------------------------------------------
# run manifest
# --------------------------------------------------------------------------


def config_digest(config: dict) -> str:
    text = canonical_json(config) + "\n"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def substrate_note() -> str:
    import scipy

    from memhist import _kernels
    if _kernels.HAVE_NUMBA:
        import numba
        kernels = f"numba={numba.__version__}" + ("" if _kernels.USE_NUMBA else " (disabled)")
    else:
        kernels = "numba=absent"
    note = (f"python={platform.python_version()} numpy={np.__version__} scipy={scipy.__version__} "
            f"{kernels} machine={platform.machine()} system={platform.system()}")
    extra = os.environ.get("MEMH_SUBSTRATE")
    return f"{note} {extra}" if extra else note


@dataclass
class RunManifest:
    root_seed: int
    config_digest: str
    recipe_summary: str
    substrate: str
    streams: dict = field(default_factory=dict)  # seed label -> [(name, derived_seed)]
    root_seed_source: str = "spec"

    def to_text(self) -> str:
        lines = [f"root_seed={self.root_seed}", f"root_seed_source={self.root_seed_source}",
                 f"config_digest={self.config_digest}", f"recipe={self.recipe_summary}",
                 f"substrate={self.substrate}"]
        for label in sorted(self.streams):
            for name, seed in self.streams[label]:
                lines.append(f"stream.{label}.{name}={seed}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        values, streams = {}, {}
        for line in text.splitlines():
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed manifest line {line!r}")
            if key.startswith("stream."):
                _, label, name = key.split(".", 2)
                streams.setdefault(label, []).append((name, int(value)))
            else:
                values[key] = value
        try:
            return cls(int(values["root_seed"]), values["config_digest"], values["recipe"], values["substrate"],
                       streams, values.get("root_seed_source", "spec"))
        except KeyError as exc:
            raise ValueError(f"manifest missing field {exc.args[0]}") from exc


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)

    def add(self, name: str, ok: bool, detail: str = ""):
        self.checks.append(CheckResult(name, bool(ok), detail))

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.ok]

    def render(self) -> str:
        return "\n".join(f"{'PASS' if c.ok else 'FAIL'} {c.name}" + (f": {c.detail}" if c.detail else "")
                         for c in self.checks)


_SNAP = re.compile(r"^snapshot-(\d+)-seed(\d+)-([a-z0-9_-]+)\.bin$")
_TRAIL = re.compile(r"^trail-seed(\d+)-([a-z0-9_-]+)\.log$")
_ORDER = re.compile(r"^order-(\d+)-seed(\d+)\.bin$")


def _read(path: Path, report: VerificationReport, name: str) -> bytes | None:
    try:
        return path.read_bytes()
    except OSError as exc:
        report.add(name, False, f"missing artifact: {exc.strerror or exc}")
        return None


def verify(run_dir: str | os.PathLike) -> VerificationReport:
    """Recompute every digest in a run directory and check the cross-branch invariants."""
    from memhist.sampler import RecordIntegrityError, order_hash, order_record_from_bytes
    from memhist.statekit import SnapshotFormatError, deserialize, diff_components

    root = Path(run_dir)
    report = VerificationReport()
    manifest_text = _read(root / "manifest.txt", report, "manifest")
    spec_bytes = _read(root / "spec.json", report, "spec")
    if manifest_text is not None:
        try:
            manifest = RunManifest.from_text(manifest_text.decode("utf-8"))
            report.add("manifest", True)
            if spec_bytes is not None:
                digest = hashlib.sha256(spec_bytes).hexdigest()
                report.add("config digest", digest == manifest.config_digest,
                           "" if digest == manifest.config_digest else "spec.json does not match manifest digest")
        except (ValueError, UnicodeDecodeError) as exc:
            report.add("manifest", False, str(exc))
    if not (root / "effects.tsv").exists():
        report.add("effects table", False, "missing artifact: effects.tsv")

    files = sorted(os.listdir(root)) if root.is_dir() else []
    trails: dict[tuple[int, str], list[AuditRecord]] = {}
    for name in files:
        m = _TRAIL.match(name)
        if not m:
            continue
        data = _read(root / name, report, f"trail {name}")
        if data is None:
            continue
        try:
            records, problems = parse_trail(data.decode("utf-8"))
        except UnicodeDecodeError:
            records, problems = [], ["not valid UTF-8"]
        report.add(f"trail {name}", not problems, "; ".join(problems))
        if not problems:
            trails[(int(m.group(1)), m.group(2))] = records

    orders: dict[int, object] = {}
    for name in files:
        m = _ORDER.match(name)
        if not m:
            continue
        data = _read(root / name, report, f"order {name}")
        if data is None:
            continue
        try:
            rec = order_record_from_bytes(data, verify=True)
            ok = order_hash(rec.batches) == rec.hash and rec.t0 == int(m.group(1))
            report.add(f"order {name}", ok, "" if ok else "t0 mismatch")
            orders[int(m.group(2))] = rec
        except (RecordIntegrityError, ValueError) as exc:
            report.add(f"order {name}", False, str(exc))

    snaps: dict[tuple[int, int, str], object] = {}
    for name in files:
        m = _SNAP.match(name)
        if not m:
            continue
        data = _read(root / name, report, f"snapshot {name}")
        if data is None:
            continue
        try:
            snaps[(int(m.group(1)), int(m.group(2)), m.group(3))] = deserialize(data, verify=True)
            report.add(f"snapshot {name}", True)
        except (SnapshotFormatError, ValueError) as exc:
            report.add(f"snapshot {name}", False, str(exc))

    for (seed, branch), records in sorted(trails.items()):
        if not branch.startswith("treat"):
            continue
        applied = [r for r in records if r.kind == "policy_applied"]
        if not applied:
            report.add(f"isolation seed{seed} {branch}", False, "no policy_applied record")
            continue
        info = applied[0].payload
        t0 = info["t0"]
        ctrl, treat = snaps.get((t0, seed, "control")), snaps.get((t0, seed, branch))
        if ctrl is None or treat is None:
            report.add(f"isolation seed{seed} {branch}", False, f"missing t0={t0} snapshots")
        else:
            diff = diff_components(ctrl, treat)
            allowed = set(info["intended"])
            ok = diff <= allowed and sorted(diff) == sorted(info["diff"])
            report.add(f"isolation seed{seed} {branch}", ok,
                       "" if ok else f"changed {sorted(diff)}, allowed {sorted(allowed)}, logged {info['diff']}")
        ctrl_trail = trails.get((seed, "control"))
        record = orders.get(seed)
        if ctrl_trail is None:
            continue
        window = lambda recs: [r.payload["hash"] for r in recs if r.kind == "order_hash" and r.payload.get("scope") == "window"]
        cw, tw = window(ctrl_trail), window(records)
        if record is not None:
            ok = cw == [record.hash]
            report.add(f"control window hash seed{seed}", ok, "" if ok else "control window differs from order record")
        if info.get("lockstep"):
            ok = cw == tw and len(cw) == 1
            report.add(f"lockstep seed{seed} {branch}", ok, "" if ok else "Control and Treat consumed different windows")
    return report


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None or value == "":
        return NOT_RECORDED
    if isinstance(value, _Absent):
        return "none"
    if isinstance(value, (dict, list)):
        return canonical_json(value)
    return str(value)


class _Absent:
    """A field recorded as explicitly unset."""


def _get(tree, *path):
    for key in path:
        if not isinstance(tree, dict) or key not in tree:
            return None
        tree = tree[key]
    return _Absent() if tree is None else tree


def read_effects(path: str | os.PathLike) -> tuple[list[tuple[int, float, float]], dict[str, str]]:
    """Rows (seed, z_early, z_final) and the summary key/value block of an effects table."""
    rows, summary = [], {}
    text = Path(path).read_text(encoding="utf-8")
    in_summary = False
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            in_summary = in_summary or line.strip() == "# summary"
            continue
        parts = line.split("\t")
        if in_summary:
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: malformed summary entry")
            summary[parts[0]] = parts[1]
            continue
        if parts == ["seed", "z_early", "z_final"]:
            continue
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            rows.append((int(parts[0]), float(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return rows, summary


def emit_report(run_dir: str | os.PathLike) -> str:
    """Reporting checklist for a run directory; a pure function of its contents."""
    root = Path(run_dir)
    try:
        spec = json.loads((root / "spec.json").read_text(encoding="utf-8"))
    except (OSError, ValueError):
        spec = {}
    try:
        manifest = RunManifest.from_text((root / "manifest.txt").read_text(encoding="utf-8"))
    except (OSError, ValueError):
        manifest = None
    effects = {}
    for name in sorted(os.listdir(root)) if root.is_dir() else []:
        if name.startswith("effects") and name.endswith(".tsv"):
            try:
                effects[name] = read_effects(root / name)
            except (OSError, ValueError):
                effects[name] = None
    recipe = spec.get("recipe", {})
    cfg = spec.get("cfg", {})
    iv = spec.get("intervention", {})

    s: dict[str, list[tuple[str, str]]] = {k: [] for k in REPORT_SECTIONS}
    data = _get(recipe, "data")
    s["Datasets"] = [("task", _fmt(_get(data, "task"))), ("train size n", _fmt(_get(data, "n"))),
                     ("input dim", _fmt(_get(data, "input_dim"))), ("label noise", _fmt(_get(data, "noise"))),
                     ("finetune data", _fmt(_get(recipe, "finetune"))),
                     ("data stream", "derived from root seed as stream 'data'" if manifest else NOT_RECORDED)]
    s["Architectures"] = [("model", _fmt(_get(recipe, "model"))), ("objective", _fmt(_get(recipe, "objective")))]
    seed_labels = sorted(manifest.streams) if manifest else []
    s["Seeds & randomness"] = [
        ("root seed", _fmt(manifest.root_seed if manifest else None)),
        ("root seed source", _fmt(manifest.root_seed_source if manifest else None)),
        ("seed count", _fmt(cfg.get("seeds"))),
        ("per-seed streams", _fmt(", ".join(seed_labels) if seed_labels else None)),
        ("generator", "SplitMix64 counter streams, SHA-256 name derivation" if manifest else NOT_RECORDED)]
    s["Sampler policy"] = [("sampler", _fmt(_get(recipe, "sampler"))),
                           ("importance weighting", _fmt(_get(recipe, "importance_weighting")))]
    s["Optimizer & meta-state"] = [("optimizer", _fmt(_get(recipe, "optimizer"))),
                                   ("averaging", _fmt(_get(recipe, "averaging"))),
                                   ("queue capacity", _fmt(_get(recipe, "queue_capacity"))),
                                   ("intervention", _fmt(iv or None)),
                                   ("carry vs reset per boundary", _fmt(_get(iv, "policies") or (
                                       "no phase boundary" if iv else None)))]
    s["Schedules"] = [("schedule", _fmt(_get(recipe, "schedule"))),
                      ("t0 / W / T", _fmt([cfg.get("t0"), cfg.get("W"), cfg.get("T")] if cfg else None))]
    s["Transforms / preprocessing"] = [("augmentation noise", _fmt(_get(recipe, "augment_noise"))),
                                       ("augmentation rng", "per-example seeds from stream 'augment'" if manifest else NOT_RECORDED)]
    steps = None
    if cfg.get("T") is not None and cfg.get("seeds") is not None:
        steps = int(cfg["T"]) * (1 + _n_arms(iv)) * int(cfg["seeds"])
    s["Compute budget"] = [("optimizer steps (all branches)", _fmt(steps)), ("substrate", _fmt(manifest.substrate if manifest else None))]
    s["Probe"] = [("probe size", _fmt(_get(data, "probe_size"))),
                  ("probe origin", "held-out draw from the data stream, frozen" if data else NOT_RECORDED),
                  ("bn recalibration before final", _fmt(cfg.get("bn_recal")))]
    s["Metrics"] = [("metric", _fmt(cfg.get("metric"))), ("readout weights", _fmt(_get(recipe, "eval_weights"))),
                    ("predictive std", _fmt(_get(recipe, "predictive_std")))]
    unc = [("CI method", "paired percentile bootstrap, type-7 quantiles, stream 'boot'" if effects else NOT_RECORDED)]
    for name, parsed in effects.items():
        if parsed is None:
            unc.append((name, NOT_RECORDED))
            continue
        rows, summary = parsed
        unc.append((f"{name} seeds", str(len(rows))))
        for key in ("ate_early", "ci_lo_early", "ci_hi_early", "ci_width_early", "ate_final", "ci_lo_final",
                    "ci_hi_final", "ci_width_final", "B", "excluded_seeds"):
            unc.append((f"{name} {key}", _fmt(summary.get(key))))
        if "epsilon" in summary:
            unc.append((f"{name} equivalence", _fmt({k: summary[k] for k in sorted(summary) if k.startswith(("epsilon", "alpha", "tost"))})))
    eps = cfg.get("epsilon")
    unc.append(("equivalence margin", _fmt(eps) if eps is not None else "not declared"))
    unc.append(("multiple-comparison policy", f"no correction; tests run: {len(effects) * (2 if eps is not None else 1)}"))
    s["Uncertainty"] = unc
    arts = []
    for name in sorted(os.listdir(root)) if root.is_dir() else []:
        if name == "report.md":
            continue
        arts.append((name, hashlib.sha256((root / name).read_bytes()).hexdigest()))
    s["Artifacts"] = arts or [("files", NOT_RECORDED)]

    out = ["# Training-history attribution report", ""]
    for section in REPORT_SECTIONS:
        out.append(f"## {section}")
        out.extend(f"- {k}: {v}" for k, v in s[section])
        out.append("")
    return "\n".join(out)


def _n_arms(iv: dict) -> int:
    if iv.get("kind") == "phase_policy":
        return max(len(iv.get("policies", [])) - 1, 1)
    return 1
