import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from memhist.model import PredictiveOutput
from memhist.rng import RngStream
from memhist.stats import (
    NLL_FLOOR, accuracy, disagreement, ece, enumerated_ate_ci, gaussian_distance_rows, linear_cka, nll,
    paired_ate_ci, prob_distance, readout, significant, tost,
)
from oracles import enumeration_oracle, t4_cdf


def probs(draw, k):
    w = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=k, max_size=k)))
    w = w + 1e-3
    return w / w.sum()


# -- bootstrap ---------------------------------------------------------------

def test_ate_mean_and_constant_ci():
    assert paired_ate_ci([1, 2, 3], 1000, RngStream("boot", 0)).ate == 2
    est = paired_ate_ci([0.3] * 6, 500, RngStream("boot", 0))
    assert (est.ci_lo, est.ci_hi, est.ate) == (0.3, 0.3, 0.3)
    assert est.ci_width == 0


def test_zero_one_example():
    assert enumeration_oracle([0, 1]) == (0.0, 1.0)
    assert enumerated_ate_ci([0, 1]) == (0.0, 1.0)
    est = paired_ate_ci([0, 1], 10_000, RngStream("boot", 4))
    assert abs(est.ci_lo - 0.0) <= 0.05 and abs(est.ci_hi - 1.0) <= 0.05


@pytest.mark.parametrize("n", [2, 3, 4])
def test_enumeration_matches_oracle(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        z = rng.normal(size=n)
        assert enumerated_ate_ci(z) == pytest.approx(enumeration_oracle(z), abs=1e-12)


def test_bootstrap_deterministic_and_stream_driven():
    z = [0.1, 0.5, 0.2, 0.9]
    a = paired_ate_ci(z, 2000, RngStream("boot", 1))
    b = paired_ate_ci(z, 2000, RngStream("boot", 1))
    c = paired_ate_ci(z, 2000, RngStream("boot", 2))
    assert (a.ci_lo, a.ci_hi) == (b.ci_lo, b.ci_hi)
    assert (a.ci_lo, a.ci_hi) != (c.ci_lo, c.ci_hi)


def test_bootstrap_errors():
    with pytest.raises(ValueError):
        paired_ate_ci([], 10)
    with pytest.raises(ValueError):
        paired_ate_ci([1.0], 0)


def test_significant():
    assert significant(0.000123456) == "0.0001235"
    assert significant(0.0) == "0"


# -- TOST ------------------------------------------------------------------------

def test_tost_worked_example_equivalent():
    d = [0.1, -0.1, 0.05, -0.05, 0.0]
    eq = tost(d, 0.5, 0.05)
    s = math.sqrt(sum(x * x for x in d) / 4)
    se = s / math.sqrt(5)
    assert eq.mean_delta == pytest.approx(0.0, abs=1e-15)
    assert eq.s == pytest.approx(s) and eq.s == pytest.approx(0.079, abs=5e-4)
    assert eq.p_lower == pytest.approx(1 - t4_cdf(0.5 / se), rel=1e-6)
    assert eq.p_upper == pytest.approx(t4_cdf(-0.5 / se), rel=1e-6)
    assert eq.equivalent and eq.p_lower < 1e-3 and eq.p_upper < 1e-3


def test_tost_worked_example_not_equivalent():
    eq = tost([0.6, 0.7, 0.65, 0.62, 0.68], 0.5, 0.05)
    assert not eq.equivalent and eq.mean_delta > 0.5 and not eq.equivalent_by_ci


def test_tost_zero_variance():
    eq = tost([0.0] * 5, 0.5)
    assert eq.equivalent and eq.p_lower == eq.p_upper == 0.0
    above = tost([0.7] * 3, 0.5)
    assert not above.equivalent and (above.p_lower, above.p_upper) == (0.0, 1.0)
    assert above.mean_delta == 0.7 and above.s == 0.0
    edge = tost([-0.5] * 4, 0.5)
    assert not edge.equivalent and (edge.p_lower, edge.p_upper) == (1.0, 0.0)


def test_tost_preconditions():
    for args in (([1.0], 0.5, 0.05), ([1.0, 2.0], 0.0, 0.05), ([1.0, 2.0], 0.5, 0.5)):
        with pytest.raises(ValueError):
            tost(*args)


@given(st.lists(st.floats(-2, 2), min_size=2, max_size=12), st.floats(0.01, 3), st.floats(0.001, 0.49))
@settings(max_examples=300, deadline=None)
def test_tost_duality(deltas, eps, alpha):
    eq = tost(deltas, eps, alpha)
    lo, hi = eq.ci_1m2a
    # an analytic tie (p == alpha) has no floating-point answer; skip it
    assume(min(abs(lo + eps), abs(hi - eps)) > 1e-9 * max(1.0, eps))
    assert (eq.p_lower < alpha and eq.p_upper < alpha) == eq.equivalent_by_ci
    assert eq.equivalent == eq.equivalent_by_ci


def test_tost_tiny_spread_does_not_divide_by_zero():
    eq = tost([0.0, 1e-300], 1.0, 0.05)
    assert eq.equivalent


# -- distances -----------------------------------------------------------------------

def test_distance_examples():
    for kind in ("tv", "js", "hellinger"):
        assert prob_distance([0.3, 0.7], [0.3, 0.7], kind) == 0
        assert prob_distance([1, 0], [0, 1], kind) == pytest.approx(1.0)
    assert prob_distance([0.5, 0.5], [1, 0], "tv") == pytest.approx(0.5)
    assert prob_distance([0.5, 0.5], [1, 0], "hellinger") == pytest.approx(math.sqrt(1 - math.sqrt(0.5)))
    assert prob_distance([0.5, 0.5], [1, 0], "hellinger") == pytest.approx(0.5412, abs=1e-4)


def test_distance_errors():
    with pytest.raises(ValueError):
        prob_distance([0.5, 0.5], [1.0, 0.0, 0.0], "tv")
    with pytest.raises(ValueError):
        prob_distance([1.5, -0.5], [0.5, 0.5], "tv")
    with pytest.raises(ValueError):
        prob_distance([0.5, 0.5], [0.5, 0.5], "kl")


@given(st.data(), st.integers(2, 6))
@settings(max_examples=150, deadline=None)
def test_distance_properties(data, k):
    p, q, r = (probs(data.draw, k) for _ in range(3))
    for kind in ("tv", "js", "hellinger"):
        d = prob_distance(p, q, kind)
        assert 0 <= d <= 1
        assert d == pytest.approx(prob_distance(q, p, kind), abs=1e-12)
        assert prob_distance(p, p, kind) == pytest.approx(0, abs=1e-7)
    assert prob_distance(p, r, "tv") <= prob_distance(p, q, "tv") + prob_distance(q, r, "tv") + 1e-12


@pytest.mark.parametrize("d", [0.0, 0.3, 1.0, 2.5])
def test_gaussian_distances_match_grid_integration(d):
    x = np.linspace(-15, 15 + d, 400_001)
    p = np.exp(-0.5 * x**2) / math.sqrt(2 * math.pi)
    q = np.exp(-0.5 * (x - d) ** 2) / math.sqrt(2 * math.pi)
    m = 0.5 * (p + q)
    tv = 0.5 * np.trapezoid(np.abs(p - q), x)
    hel = math.sqrt(max(1 - np.trapezoid(np.sqrt(p * q), x), 0))
    js = 0.5 * np.trapezoid(p * np.log2(p / m) + q * np.log2(q / m), x)
    mu_a = np.array([[0.0, 0.0]])
    mu_b = np.array([[d * 0.6, d * 0.8]]) * 2.0  # |diff| = 2d, sigma = 2
    assert gaussian_distance_rows(mu_a, mu_b, 2.0, "tv")[0] == pytest.approx(tv, abs=1e-7)
    assert gaussian_distance_rows(mu_a, mu_b, 2.0, "hellinger")[0] == pytest.approx(hel, abs=1e-6)
    assert gaussian_distance_rows(mu_a, mu_b, 2.0, "js")[0] == pytest.approx(js, abs=1e-7)


# -- classification readouts -----------------------------------------------------------

def out(values) -> PredictiveOutput:
    return PredictiveOutput(np.asarray(values, dtype=float), True)


def test_disagreement():
    a = out([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
    assert disagreement(a, a) == 0
    assert disagreement(out([[0.9, 0.1], [0.2, 0.8]]), out([[0.1, 0.9], [0.8, 0.2]])) == 1
    with pytest.raises(ValueError):
        disagreement(PredictiveOutput(np.zeros((2, 1)), False), a)


@given(st.data())
@settings(max_examples=60, deadline=None)
def test_disagreement_argmax_invariance(data):
    a = np.array([probs(data.draw, 3) for _ in range(5)])
    b = np.array([probs(data.draw, 3) for _ in range(5)])
    scale = np.array(data.draw(st.lists(st.floats(0.1, 10), min_size=5, max_size=5)))[:, None]
    c = b * scale
    c = c / c.sum(axis=1, keepdims=True)
    assert np.array_equal(np.argmax(b, axis=1), np.argmax(c, axis=1))
    assert disagreement(out(a), out(b)) == disagreement(out(a), out(c))


def test_ece_and_nll_examples():
    preds = np.tile([0.7, 0.3], (10, 1))
    labels = np.array([0] * 7 + [1] * 3)
    assert ece(preds, labels, bins=1) == pytest.approx(0.0, abs=1e-12)
    onehot = np.eye(3)[[0, 1, 2, 1]]
    assert ece(onehot, [0, 1, 2, 1]) == 0
    assert nll(onehot, [0, 1, 2, 1]).value == 0
    assert nll(np.full((4, 2), 0.5), [0, 1, 0, 1]).value == pytest.approx(math.log(2))
    r = nll(np.array([[1.0, 0.0]]), [1])
    assert r.clamped == 1 and r.value == pytest.approx(-math.log(NLL_FLOOR))
    assert accuracy(onehot, [0, 1, 2, 0]) == 0.75


def test_ece_reference():
    # two bins with known gaps
    preds = np.array([[0.9, 0.1], [0.9, 0.1], [0.6, 0.4], [0.6, 0.4]])
    labels = np.array([0, 1, 0, 0])
    # bin (0.8,1]: acc .5 conf .9; bin (.5,.6]: acc 1 conf .6
    assert ece(preds, labels, bins=10) == pytest.approx(0.5 * 0.4 + 0.5 * 0.4)


def test_linear_cka():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 6))
    R, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    assert linear_cka(X, X) == pytest.approx(1.0)
    assert linear_cka(X, X @ R) == pytest.approx(1.0)
    assert linear_cka(3.0 * X, X) == pytest.approx(1.0)
    worst = max(linear_cka(rng.standard_normal((200, 8)), rng.standard_normal((200, 8))) for _ in range(100))
    assert worst < 0.2
    with pytest.raises(ValueError):
        linear_cka(np.ones((5, 2)), X[:5])


def test_readout_dispatch():
    a = out([[0.9, 0.1], [0.4, 0.6]])
    b = out([[0.6, 0.4], [0.4, 0.6]])
    assert readout("tv", a, b).value == pytest.approx(0.15)
    assert readout("acc", a, b, [0, 1]).value == 0
    assert readout("nll", a, out([[1.0, 0.0], [1.0, 0.0]]), [0, 1]).flags == ("nll_clamped",)
    reg_a = PredictiveOutput(np.zeros((3, 1)), False)
    reg_b = PredictiveOutput(np.ones((3, 1)), False)
    assert readout("tv", reg_a, reg_b, predictive_std=1.0).value == pytest.approx(0.3829249, abs=1e-6)
    with pytest.raises(ValueError):
        readout("acc", reg_a, reg_b, np.zeros(3))
