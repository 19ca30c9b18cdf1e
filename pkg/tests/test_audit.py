import dataclasses
import hashlib

import pytest

from memhist.audit import (GENESIS, NOT_RECORDED, REPORT_SECTIONS, AuditTrail, RunManifest, TrailError,
                           canonical_json, config_digest, emit_report, parse_trail, verify)
from memhist.sampler import order_record_from_bytes, order_record_to_bytes
from memhist.statekit import deserialize, serialize

from conftest import small_tree


def _write(path, entries):
    trail = AuditTrail(path)
    for step, kind, payload in entries:
        trail.log(step, kind, payload)
    trail.close()
    return trail


ENTRIES = [(0, "stream_derived", {"name": "sampler", "seed": 3}), (1, "ema_decay", {"which": "ema", "alpha": 0.9}),
           (1, "order_hash", {"scope": "window", "hash": "ab"}), (4, "buffer_norms", {"tag": "t0", "m": 1.5})]


class TestTrail:
    def test_chain_matches_manual_fold(self, tmp_path):
        trail = _write(tmp_path / "t.log", ENTRIES)
        head = GENESIS
        for rec in trail.records:
            head = hashlib.sha256(head + rec.body()).digest()
        assert head == trail.head

    def test_identical_sequences_identical_chains(self, tmp_path):
        a = _write(tmp_path / "a.log", ENTRIES)
        b = _write(tmp_path / "b.log", ENTRIES)
        assert a.head == b.head
        assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()

    def test_payload_change_changes_chain(self):
        a = AuditTrail(); a.log(0, "ema_decay", {"alpha": 0.9})
        b = AuditTrail(); b.log(0, "ema_decay", {"alpha": 0.91})
        assert a.head != b.head

    def test_empty_trail_head_is_genesis(self):
        assert AuditTrail().head == hashlib.sha256(b"").digest()

    def test_roundtrip_parse(self, tmp_path):
        trail = _write(tmp_path / "t.log", ENTRIES)
        records, problems = parse_trail((tmp_path / "t.log").read_text())
        assert problems == []
        assert records == trail.records
        assert records[-1].payload == {"event": "end", "records": len(ENTRIES)}

    def test_rejects_out_of_order_and_unknown_kind(self):
        trail = AuditTrail()
        trail.log(5, "ema_decay", {})
        with pytest.raises(TrailError, match="out-of-order"):
            trail.log(4, "ema_decay", {})
        with pytest.raises(TrailError, match="unknown record kind"):
            trail.log(6, "gossip", {})

    def test_closed_trail_rejects_records(self):
        trail = AuditTrail()
        trail.close()
        trail.close()
        with pytest.raises(TrailError):
            trail.log(0, "ema_decay", {})

    def test_every_byte_flip_detected(self, tmp_path):
        _write(tmp_path / "t.log", ENTRIES)
        raw = (tmp_path / "t.log").read_bytes()
        first_line_end = raw.index(b"\n")
        for pos in range(0, first_line_end, 3):
            bad = bytearray(raw)
            bad[pos] ^= 0x01
            _, problems = parse_trail(bad.decode("utf-8", errors="replace"))
            assert problems, pos

    def test_edit_breaks_from_that_line_on(self, tmp_path):
        _write(tmp_path / "t.log", ENTRIES)
        lines = (tmp_path / "t.log").read_text().splitlines(keepends=True)
        lines[2] = lines[2].replace('"ab"', '"cd"')
        _, problems = parse_trail("".join(lines))
        assert problems[0].startswith("line 3:")
        # a forged record checksum still fails on the chain
        parts = lines[2].rstrip("\n").split("\t")
        parts[4] = hashlib.sha256("\t".join(parts[:4]).encode()).hexdigest()
        lines[2] = "\t".join(parts) + "\n"
        _, problems = parse_trail("".join(lines))
        assert problems == ["line 3: chain hash mismatch"]

    def test_truncation_detected(self, tmp_path):
        _write(tmp_path / "t.log", ENTRIES)
        lines = (tmp_path / "t.log").read_text().splitlines(keepends=True)
        _, problems = parse_trail("".join(lines[:-1]))
        assert problems == ["trail truncated: end marker missing"]
        _, problems = parse_trail("".join(lines)[:-1])
        assert "trail does not end with a newline" in problems


class TestManifest:
    def test_canonical_json(self):
        assert canonical_json({"b": 1, "a": [1, 2], "c": "é"}) == '{"a":[1,2],"b":1,"c":"é"}'

    def test_config_digest_key_order_free(self):
        d = config_digest({"x": 1, "y": {"b": 2, "a": 1}})
        assert d == config_digest({"y": {"a": 1, "b": 2}, "x": 1})
        assert d == hashlib.sha256(b'{"x":1,"y":{"a":1,"b":2}}\n').hexdigest()

    def test_roundtrip(self):
        m = RunManifest(42, "ab" * 32, "linear regress", "python=3", {"seed0": [("sampler", 7), ("init", 9)]}, "env:X")
        assert RunManifest.from_text(m.to_text()) == m

    def test_malformed(self):
        with pytest.raises(ValueError, match="malformed"):
            RunManifest.from_text("root_seed\n")
        with pytest.raises(ValueError, match="missing field"):
            RunManifest.from_text("root_seed=1\n")


def _failed(report):
    return {c.name for c in report.failures()}


class TestVerify:
    def test_fresh_run_passes(self, opt_reset_run):
        report = verify(opt_reset_run)
        assert report.ok, report.render()
        names = {c.name for c in report.checks}
        assert {"manifest", "config digest", "isolation seed0 treat", "lockstep seed1 treat"} <= names

    def test_missing_artifact(self, opt_reset_run):
        (opt_reset_run / "effects.tsv").unlink()
        report = verify(opt_reset_run)
        assert _failed(report) == {"effects table"}
        assert "missing artifact" in report.failures()[0].detail

    def test_spec_edit_breaks_digest(self, opt_reset_run):
        spec = opt_reset_run / "spec.json"
        spec.write_text(spec.read_text().replace('"T":20', '"T":21'))
        assert _failed(verify(opt_reset_run)) == {"config digest"}

    def test_order_record_byte_flip(self, opt_reset_run):
        path = opt_reset_run / "order-10-seed0.bin"
        raw = bytearray(path.read_bytes())
        raw[30] ^= 0x04
        path.write_bytes(bytes(raw))
        assert "order order-10-seed0.bin" in _failed(verify(opt_reset_run))

    def test_resealed_order_id_change(self, opt_reset_run):
        path = opt_reset_run / "order-10-seed0.bin"
        rec = order_record_from_bytes(path.read_bytes())
        batches = [b.copy() for b in rec.batches]
        batches[0][0] = (batches[0][0] + 1) % 64
        forged = dataclasses.replace(rec, batches=tuple(batches))
        path.write_bytes(order_record_to_bytes(forged))
        report = verify(opt_reset_run)
        fail = {c.name: c.detail for c in report.failures()}
        assert fail == {"order order-10-seed0.bin": "order_hash mismatch"}

    def test_trail_edit(self, opt_reset_run):
        path = opt_reset_run / "trail-seed1-control.log"
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[:-1]))
        report = verify(opt_reset_run)
        assert "trail trail-seed1-control.log" in _failed(report)

    def test_snapshot_byte_flip(self, opt_reset_run):
        path = opt_reset_run / "snapshot-20-seed0-treat.bin"
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x80
        path.write_bytes(bytes(raw))
        assert _failed(verify(opt_reset_run)) == {"snapshot snapshot-20-seed0-treat.bin"}

    def test_resealed_sampler_change_breaks_isolation(self, opt_reset_run):
        path = opt_reset_run / "snapshot-10-seed0-treat.bin"
        snap = deserialize(path.read_bytes())
        sampler = dataclasses.replace(snap.sampler, drawn=snap.sampler.drawn + 1)
        path.write_bytes(serialize(dataclasses.replace(snap, sampler=sampler)))
        report = verify(opt_reset_run)
        fail = {c.name: c.detail for c in report.failures()}
        assert list(fail) == ["isolation seed0 treat"]
        assert "sampler" in fail["isolation seed0 treat"]


class TestReport:
    def test_sections_and_determinism(self, opt_reset_run):
        text = emit_report(opt_reset_run)
        headings = [line[3:] for line in text.splitlines() if line.startswith("## ")]
        assert headings == list(REPORT_SECTIONS) and len(headings) == 12
        assert emit_report(opt_reset_run) == text
        assert (opt_reset_run / "report.md").read_text() == text
        assert "- equivalence margin: not declared" in text

    def test_declared_margin(self, run_dirs):
        run = run_dirs("null_eps", small_tree("identity", epsilon=0.05))
        text = emit_report(run)
        assert "- equivalence margin: 0.05" in text
        assert "tost_equivalent" in text

    def test_missing_fields_marked(self, tmp_path):
        text = emit_report(tmp_path)
        assert f"- root seed: {NOT_RECORDED}" in text
        assert f"- files: {NOT_RECORDED}" in text
        assert [line[3:] for line in text.splitlines() if line.startswith("## ")] == list(REPORT_SECTIONS)
