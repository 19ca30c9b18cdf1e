import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memhist.rng import RngStream
from memhist.sampler import (
    EMPTY_SHA256, OrderRecord, RecordIntegrityError, SamplerPolicy, SamplerState, importance_weights, next_batch,
    next_step_batch, order_hash, order_record_from_bytes, order_record_to_bytes, permute_window, record_window,
)


def state(kind="rr", n=10, B=3, seed=0, priorities=None) -> SamplerState:
    return SamplerState(SamplerPolicy(kind, B, priorities), n, RngStream("order", seed))


def hash_oracle(batches) -> str:
    buf = b"".join(struct.pack(">I", len(b)) + b"".join(struct.pack(">Q", int(i)) for i in b) for b in batches)
    return hashlib.sha256(buf).hexdigest()


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32))
@settings(max_examples=50, deadline=None)
def test_rr_epoch_coverage(n, B, seed):
    B = min(B, n)
    s = state("rr", n, B, seed)
    for _ in range(3):
        epoch = np.concatenate([next_batch(s) for _ in range(s.steps_per_epoch)])
        assert sorted(epoch.tolist()) == list(range(n))


def test_rr_tail_kept():
    s = state("rr", 10, 4)
    assert [len(next_batch(s)) for _ in range(6)] == [4, 4, 2, 4, 4, 2]
    assert s.epoch == 1


def test_wr_single_example():
    s = state("wr", 1, 1)
    assert all(next_batch(s).tolist() == [0] for _ in range(5))


def test_wr_in_range():
    s = state("wr", 7, 5, 3)
    ids = np.concatenate([next_batch(s) for _ in range(100)])
    assert ids.min() >= 0 and ids.max() < 7


def test_prioritized_uniform_frequency():
    n, B, draws = 8, 1, 100_000
    s = state("prioritized", n, B, 5, np.ones(n))
    ids = np.concatenate([next_batch(s) for _ in range(draws)])
    counts = np.bincount(ids, minlength=n)
    expected = draws / n
    sigma = np.sqrt(draws * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


def test_prioritized_batch_distinct():
    s = state("prioritized", 12, 6, 1, np.arange(1, 13, dtype=float))
    for _ in range(20):
        b = next_batch(s)
        assert len(set(b.tolist())) == 6


def test_prioritized_renormalizes_at_epoch_boundary():
    s = state("prioritized", 4, 2, 0, np.ones(4))
    s.update_priorities([1.0, 1.0, 1.0, 5.0])
    next_batch(s)
    np.testing.assert_array_equal(s.probs, 0.25)
    next_batch(s)
    np.testing.assert_allclose(s.probs, [0.125, 0.125, 0.125, 0.625])


def test_policy_validation():
    with pytest.raises(ValueError):
        SamplerPolicy("prioritized", 2, np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        SamplerPolicy("rr", 0)
    with pytest.raises(ValueError):
        state("rr", 3, 4)


@pytest.mark.parametrize("kind", ["rr", "wr", "prioritized"])
def test_record_matches_stepping(kind):
    pri = np.linspace(1, 2, 20) if kind == "prioritized" else None
    a, b = state(kind, 20, 3, 9, pri), state(kind, 20, 3, 9, pri)
    aug_a, aug_b = RngStream("augment", 1), RngStream("augment", 1)
    rec = record_window(a, 15, aug_a, t0=4)
    stepped = [next_step_batch(b, aug_b) for _ in range(15)]
    assert rec.hash == order_hash([ids for ids, _ in stepped])
    np.testing.assert_array_equal(rec.aug_seeds, np.concatenate([aug for _, aug in stepped]))
    assert rec.hash == record_window(state(kind, 20, 3, 9, pri), 15, RngStream("augment", 1)).hash
    # state positioned after the window
    assert next_batch(a).tolist() == next_batch(b).tolist()


def test_pending_replay():
    s = state("rr", 10, 2)
    aug = RngStream("augment", 0)
    rec = record_window(s.copy(), 4, aug.copy())
    s.pending = rec.as_pending()
    replayed = [next_step_batch(s, aug)[0] for _ in range(4)]
    assert order_hash(replayed) == rec.hash


def test_full_batch_window():
    rec = record_window(state("rr", 6, 6), 1, RngStream("a", 0))
    assert sorted(rec.batches[0].tolist()) == list(range(6))


def test_order_hash_known_values():
    assert order_hash([]) == EMPTY_SHA256 == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert order_hash([[0]]) != order_hash([[1]])
    assert order_hash([[0, 1], [2]]) != order_hash([[0], [1, 2]])
    for batches in ([[0, 1], [2]], [[0], [1, 2]], [[5, 2**63 + 7]]):
        assert order_hash([np.array(b, dtype=np.uint64) for b in batches]) == hash_oracle(batches)


@given(st.lists(st.lists(st.integers(0, 2**62), max_size=5), max_size=6))
@settings(max_examples=60, deadline=None)
def test_order_hash_matches_oracle(batches):
    assert order_hash([np.array(b, dtype=np.int64) for b in batches]) == hash_oracle(batches)


@given(st.integers(0, 2**32), st.integers(1, 8), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_permute_preserves_multiset_and_sizes(seed, W, B):
    rec = record_window(state("wr", 10, B, seed), W, RngStream("augment", seed))
    out = permute_window(rec, RngStream("permute", seed + 1))
    assert sorted(out.flat_ids().tolist()) == sorted(rec.flat_ids().tolist())
    assert [len(b) for b in out.batches] == [len(b) for b in rec.batches]
    pairs = sorted(zip(rec.flat_ids().tolist(), rec.aug_seeds.tolist()))
    assert sorted(zip(out.flat_ids().tolist(), out.aug_seeds.tolist())) == pairs


def test_permute_singleton_unchanged():
    rec = record_window(state("rr", 1, 1), 1, RngStream("augment", 0))
    out = permute_window(rec, RngStream("permute", 3))
    assert out.hash == rec.hash


def test_permute_changes_hash_across_streams():
    rec = record_window(state("rr", 20, 5), 2, RngStream("augment", 0))
    hashes = {permute_window(rec, RngStream("permute", s)).hash for s in range(100)}
    assert len(hashes - {rec.hash}) >= 99


def test_permute_without_aug_reuse_keeps_positions():
    rec = record_window(state("rr", 8, 4), 2, RngStream("augment", 0))
    out = permute_window(rec, RngStream("p", 1), reuse_aug=False)
    np.testing.assert_array_equal(out.aug_seeds, rec.aug_seeds)


def test_importance_weights():
    np.testing.assert_array_equal(importance_weights([0, 1, 2], np.ones(3), 3), 1.0)
    np.testing.assert_allclose(importance_weights([0, 1], [2.0, 1.0], 2), [0.75, 1.5])
    with pytest.raises(ValueError):
        importance_weights([0], [0.0, 1.0], 2)


def test_order_record_file_roundtrip_and_tamper():
    rec = record_window(state("rr", 10, 3), 5, RngStream("augment", 2), t0=77)
    buf = order_record_to_bytes(rec)
    assert buf[:8] == b"MEMH-OR1"
    back = order_record_from_bytes(buf)
    assert back.hash == rec.hash and back.t0 == 77 and back.W == 5
    np.testing.assert_array_equal(back.aug_seeds, rec.aug_seeds)
    rng = np.random.default_rng(0)
    for pos in rng.integers(0, len(buf), 20):
        bad = bytearray(buf)
        bad[pos] ^= 1 << int(rng.integers(0, 8))
        with pytest.raises(RecordIntegrityError):
            order_record_from_bytes(bytes(bad))


def test_order_record_rejects_seed_mismatch():
    with pytest.raises(ValueError):
        OrderRecord(0, (np.array([1, 2]),), np.array([1], dtype=np.uint64), "")
