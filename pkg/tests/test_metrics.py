from __future__ import annotations

import math
import pickle

import krippendorff
import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import stats as sps

from tierbench import metrics as m
from tierbench.domain import SCORE_TOL, TokenStats
from tierbench.errors import DomainError

unit = st.floats(0, 1, allow_nan=False)
cost = st.floats(0, 1e4, allow_nan=False)
score_lists = st.lists(st.floats(0, 1, allow_nan=False), min_size=3, max_size=25)


# -- cost of pass ----------------------------------------------------------------


@given(cost)
def test_cop_at_full_pass_rate_is_cost(c):
    assert m.cost_of_pass(c, 1.0) == c


@given(cost, st.floats(0.001, 1), st.floats(0.001, 1))
def test_cop_monotone_decreasing_in_pass_rate(c, p1, p2):
    lo, hi = sorted((p1, p2))
    assert m.cost_of_pass(c, hi) <= m.cost_of_pass(c, lo)


def test_cop_unattainable_and_errors():
    assert m.cost_of_pass(0.5, 0.0) is m.UNATTAINABLE
    assert str(m.UNATTAINABLE) == "unattainable"
    assert repr(m.UNATTAINABLE) == "UNATTAINABLE"
    assert pickle.loads(pickle.dumps(m.UNATTAINABLE)) is m.UNATTAINABLE
    with pytest.raises(DomainError):
        m.cost_of_pass(-1.0, 0.5)
    with pytest.raises(DomainError):
        m.cost_of_pass(1.0, 1.5)


tier_names = st.sampled_from(m.TIER_ORDER + ("T9", "X"))
cop_values = st.one_of(st.just(m.UNATTAINABLE), st.floats(0, 100, allow_nan=False))


@given(st.dictionaries(tier_names, cop_values, min_size=1), tier_names, cop_values)
def test_frontier_minimal_and_never_rises(table, extra_tier, extra_value):
    tier, best = m.frontier_cop(table)
    finite = [v for v in table.values() if v is not m.UNATTAINABLE]
    if not finite:
        assert tier is None and best is m.UNATTAINABLE
    else:
        assert all(best <= v for v in finite)
        assert table[tier] == best
    assume(extra_tier not in table)
    _, after = m.frontier_cop({**table, extra_tier: extra_value})
    if best is not m.UNATTAINABLE:
        assert after <= best


def test_frontier_ties_go_to_lower_tier():
    assert m.frontier_cop({"T3": 0.1, "T1": 0.1, "T5": 0.2}) == ("T1", 0.1)
    with pytest.raises(DomainError):
        m.frontier_cop({})


# -- distributions ---------------------------------------------------------------

counts = st.integers(0, 10**7)


@given(counts, counts, counts, counts)
def test_token_fractions_normalized(a, b, c, d):
    dist = m.token_distribution(TokenStats(a, b, c, d))
    if a + b + c + d == 0:
        assert dist is None
        return
    assert all(0.0 <= v <= 1.0 for v in dist.values())
    assert math.fsum(dist.values()) == pytest.approx(1.0, abs=1e-9)


def test_latency_breakdown():
    assert m.latency_breakdown(0, 0) is None
    lb = m.latency_breakdown(25.0, 75.0)
    assert lb == {"agent": 25.0, "judge": 75.0, "total": 100.0, "judge_pct": 0.75}
    with pytest.raises(DomainError):
        m.latency_breakdown(-1, 0)


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=8))
def test_strategic_drift_endpoints(vec):
    v = np.asarray(vec)
    assume(np.linalg.norm(v) > 1e-3)
    assert m.strategic_drift(v, v) == pytest.approx(0.0, abs=1e-9)
    assert m.strategic_drift(v, -v) == pytest.approx(2.0, abs=1e-9)


def test_strategic_drift_orthogonal_and_degenerate():
    assert m.strategic_drift([1, 0, 0], [0, 3, 0]) == pytest.approx(1.0)
    assert m.strategic_drift([0, 0], [1, 1]) is None
    with pytest.raises(DomainError):
        m.strategic_drift([1, 2], [1, 2, 3])


# -- rates and consistency -------------------------------------------------------


@given(st.floats(1e-6, 1), st.integers(2, 20))
def test_consistency_constant_is_one(value, n):
    assert m.consistency([value] * n) == pytest.approx(1.0)


def test_consistency_edge_cases():
    assert m.consistency([0.5]) is None
    assert m.consistency([0.0, 0.0]) is None
    assert m.consistency([1.0, 3.0]) == pytest.approx(0.5)
    assert m.consistency([1.0, 3.0], ddof=1) == pytest.approx(1 - math.sqrt(2) / 2)


@given(st.integers(0, 200), st.integers(1, 200))
def test_wilson_contains_point_estimate(k, n):
    assume(k <= n)
    lo, hi = m.wilson_interval(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


def test_wilson_rejects_empty():
    with pytest.raises(DomainError):
        m.wilson_interval(0, 0)


@given(st.lists(st.booleans(), min_size=1, max_size=60), st.integers(2, 4))
def test_pass_rate_gating_and_duplication(flags, k):
    est = m.pass_rate(flags)
    assert est.has_ci == (len(flags) > m.CI_MIN_N)
    dup = m.pass_rate(flags * k)
    assert dup.value == pytest.approx(est.value)
    assert dup.n == est.n * k
    if est.has_ci:
        assert dup.ci_high - dup.ci_low <= est.ci_high - est.ci_low + 1e-12
        assert est.ci_low <= est.value <= est.ci_high


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=60), st.integers(2, 4))
def test_mean_estimate_gating_and_duplication(xs, k):
    est = m.mean_estimate(xs)
    assert est.has_ci == (len(xs) > m.CI_MIN_N)
    dup = m.mean_estimate(xs * k)
    assert dup.value == pytest.approx(est.value)
    if est.has_ci:
        assert est.ci_low <= est.value + 1e-12 and est.value - 1e-12 <= est.ci_high
        assert dup.ci_high - dup.ci_low <= est.ci_high - est.ci_low + 1e-12


def test_rates_reject_empty_input():
    with pytest.raises(DomainError):
        m.pass_rate([])
    with pytest.raises(DomainError):
        m.mean_estimate([])


@pytest.mark.parametrize("fn", [m.impl_rate, m.progress_rate])
def test_ratio_metrics(fn):
    assert fn(3, 4) == 0.75
    for args in [(1, 0), (-1, 4), (5, 4)]:
        with pytest.raises(DomainError):
            fn(*args)


def test_change_fail_and_ablation():
    assert m.change_fail_percentage(0, 0) is None
    assert m.change_fail_percentage(1, 4) == 0.25
    assert m.ablation_score(0.9, 0.7) == pytest.approx(0.2)


# -- agreement -------------------------------------------------------------------


@given(score_lists, st.randoms(use_true_random=False))
def test_correlations_symmetric_and_match_scipy(a, rnd):
    b = list(a)
    rnd.shuffle(b)
    b = [min(1.0, x + rnd.random() * 0.1) for x in b]
    assert m.mean_abs_delta(a, b) == m.mean_abs_delta(b, a)
    for fn, ref in ((m.pearson, sps.pearsonr), (m.spearman, sps.spearmanr)):
        ab, ba = fn(a, b), fn(b, a)
        assert ab == ba or (ab is not None and ba is not None and abs(ab - ba) < 1e-12)
        if ab is not None and np.std(a) > 1e-6 and np.std(b) > 1e-6:
            assert ab == pytest.approx(float(ref(a, b)[0]), abs=1e-9)


def test_average_ranks_with_ties():
    assert list(m.average_ranks([0.5, 0.1, 0.5, 0.9])) == [2.5, 1.0, 2.5, 4.0]


def test_correlation_degenerate_inputs():
    assert m.pearson([1.0], [2.0]) is None
    assert m.pearson([1.0, 1.0], [1.0, 2.0]) is None
    with pytest.raises(DomainError):
        m.pearson([1, 2], [1, 2, 3])
    with pytest.raises(DomainError):
        m.spearman([1, 2], [1, 2, 3])
    with pytest.raises(DomainError):
        m.mean_abs_delta([], [])


@given(st.lists(st.lists(st.floats(0, 1, allow_nan=False), min_size=4, max_size=4), min_size=2, max_size=4))
def test_alpha_matches_reference(rows):
    arr = np.asarray(rows)
    ours = m.krippendorff_alpha_interval(rows)
    pooled = arr.ravel()
    if np.ptp(pooled) < SCORE_TOL:
        assert ours is None
        return
    assume(ours is not None)
    ref = krippendorff.alpha(reliability_data=arr, level_of_measurement="interval")
    assert ours == pytest.approx(ref, abs=1e-9)


def test_alpha_perfect_constant_missing():
    assert m.krippendorff_alpha_interval([[0.1, 0.5, 0.9], [0.1, 0.5, 0.9]]) == pytest.approx(1.0)
    assert m.krippendorff_alpha_interval([[0.7, 0.7], [0.7, 0.7]]) is None
    assert m.krippendorff_alpha_interval([[0.1, None], [0.2, 0.4]]) is None
    data = [[0.1, None, 0.9, 0.4], [0.2, 0.5, 0.8, None], [0.1, 0.6, None, 0.5]]
    ref = krippendorff.alpha(
        reliability_data=np.array(data, dtype=float), level_of_measurement="interval"
    )
    assert m.krippendorff_alpha_interval(data) == pytest.approx(ref, abs=1e-12)
    for bad in ([0.1, 0.2], [], [[0.1, 0.2], [0.3]]):
        with pytest.raises(DomainError):
            m.krippendorff_alpha_interval(bad)


def test_judge_agreement_shape_checks():
    rep = m.judge_agreement([[0.1, 0.2, 0.3], [0.3, 0.2, 0.1]])
    assert rep.judges == ("judge0", "judge1")
    assert rep.low_sample and rep.n_runs == 3
    pair = rep.pairwise[("judge0", "judge1")]
    assert pair.spearman_rho == pytest.approx(-1.0)
    for bad, names in [
        ([[0.1, 0.2]], None),
        ([[0.1, 0.2], [0.1]], None),
        ([[0.1], [0.2]], None),
        ([[0.1, 0.2], [0.2, 0.1]], ["only-one"]),
    ]:
        with pytest.raises(DomainError):
            m.judge_agreement(bad, names)
    big = m.judge_agreement([list(np.linspace(0, 1, 30)), list(np.linspace(0, 1, 30))])
    assert not big.low_sample


def test_alpha_below_score_resolution_is_undefined():
    assert m.krippendorff_alpha_interval([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 3.6e-72]]) is None
