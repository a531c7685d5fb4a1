import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaincc

from mtnic.autodiff import NumericError, Tensor, finite_difference_check
from mtnic.survival import (
    SurvivalRecord,
    chi2_sf,
    cox_loss,
    gamma_q,
    kaplan_meier,
    log_rank_test,
    median_risk_split,
    read_cohort_csv,
    write_cohort_csv,
)

from oracles import chi2_sf_1dof, cox_direct, km_product_limit, logrank_tabulation

R = SurvivalRecord


def recs(times, events):
    return [R(float(t), bool(e)) for t, e in zip(times, events)]


# -- cox loss -----------------------------------------------------------------


def test_cox_single_subject_zero():
    for r in (-3.0, 0.0, 2.5):
        assert cox_loss(Tensor([r]), recs([5], [1])).item() == pytest.approx(0.0, abs=1e-15)


def test_cox_two_events_ln2():
    assert cox_loss(Tensor([0.0, 0.0]), recs([1, 2], [1, 1])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cox_three_subject_example():
    f = [0.5, -0.3, 0.2]
    expected = -((0.5 - math.log(math.exp(0.5) + math.exp(-0.3) + math.exp(0.2))) + (0.2 - math.log(math.exp(0.2))))
    got = cox_loss(Tensor(f), recs([1, 2, 3], [1, 0, 1])).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert round(got, 4) == 0.7840


RISK_SETTINGS = [(0.0, 0.0, 0.0), (0.5, -0.3, 0.2), (3.0, -2.0, 1.0), (-1.5, -1.5, 4.0), (40.0, 39.0, -40.0)]
TIME_ORDERS = sorted(set(itertools.permutations((1, 2, 3)))) + [(1, 1, 2), (2, 1, 1), (2, 2, 2), (3, 1, 3)]
EVENT_PATTERNS = [p for p in itertools.product((0, 1), repeat=3) if any(p)]


@pytest.mark.parametrize("times", TIME_ORDERS)
def test_cox_matches_direct_sum_on_all_three_subject_configs(times):
    for events, risks in itertools.product(EVENT_PATTERNS, RISK_SETTINGS):
        got = cox_loss(Tensor(risks), recs(times, events)).item()
        assert abs(got - cox_direct(risks, times, events)) <= 1e-9, (times, events, risks)


def test_cox_shift_invariance():
    r = np.random.default_rng(0)
    for _ in range(20):
        n = int(r.integers(2, 12))
        times, events = r.integers(1, 6, n), r.integers(0, 2, n)
        events[0] = 1
        f = r.standard_normal(n) * 3
        c = r.uniform(-50, 50)
        a = cox_loss(Tensor(f), recs(times, events)).item()
        b = cox_loss(Tensor(f + c), recs(times, events)).item()
        assert abs(a - b) <= 1e-10


def test_cox_gradient_matches_finite_differences():
    r = np.random.default_rng(1)
    for _ in range(10):
        n = int(r.integers(2, 10))
        records = recs(r.integers(1, 5, n), np.r_[1, r.integers(0, 2, n - 1)])
        f = Tensor(r.standard_normal(n), requires_grad=True)
        rep = finite_difference_check(lambda: cox_loss(f, records), [f], epsilon=1e-5, tolerance=1e-6)
        assert rep.passed, rep.per_param


def test_cox_earliest_death_higher_risk_lowers_loss():
    for times in itertools.permutations((1, 2, 3)):
        for events in EVENT_PATTERNS:
            for risks in RISK_SETTINGS[:4]:
                records = recs(times, events)
                first = min((i for i in range(3) if events[i]), key=lambda i: times[i])
                bumped = list(risks)
                bumped[first] += 0.5
                before = cox_loss(Tensor(risks), records).item()
                after = cox_loss(Tensor(bumped), records).item()
                others_at_risk = any(times[j] >= times[first] for j in range(3) if j != first)
                if others_at_risk:
                    assert after < before
                else:
                    assert after == pytest.approx(before, abs=1e-12)


def test_cox_errors():
    with pytest.raises(ValueError):
        cox_loss(Tensor([0.0, 1.0]), recs([1, 2], [0, 0]))
    with pytest.raises((ValueError, NumericError)):
        cox_loss(np.array([np.nan, 1.0]), recs([1, 2], [1, 1]))


# -- Kaplan-Meier ---------------------------------------------------------------


def test_km_hand_case_exact():
    curve = kaplan_meier(recs([1, 2, 3], [1, 0, 1]))
    assert curve.at(0.5) == 1.0
    assert curve.at(1) == 2 / 3
    assert curve.at(2) == 2 / 3
    assert curve.at(3) == 0.0
    assert list(curve.times) == [1.0, 3.0] and list(curve.at_risk) == [3, 1] and list(curve.events) == [1, 1]


def test_km_all_censored():
    curve = kaplan_meier(recs([1, 2, 3], [0, 0, 0]))
    assert curve.times.size == 0 and curve.at(100) == 1.0


def test_km_duplication_invariance():
    times, events = [1, 2, 2, 3, 5, 8], [1, 1, 0, 1, 0, 1]
    a = kaplan_meier(recs(times, events))
    b = kaplan_meier(recs(times * 2, events * 2))
    assert np.array_equal(a.times, b.times)
    np.testing.assert_allclose(a.survival, b.survival, rtol=0, atol=1e-15)


def test_km_empty():
    with pytest.raises(ValueError):
        kaplan_meier([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=1, max_size=30), st.randoms())
def test_km_properties(data, rnd):
    records = [R(float(t), e) for t, e in data]
    curve = kaplan_meier(records)
    shuffled = list(records)
    rnd.shuffle(shuffled)
    other = kaplan_meier(shuffled)
    assert np.array_equal(curve.survival, other.survival)
    assert np.all(np.diff(curve.survival) <= 0) and np.all((curve.survival >= 0) & (curve.survival <= 1))
    oracle = km_product_limit([t for t, _ in data], [e for _, e in data])
    for t, s in oracle.items():
        assert curve.at(t) == pytest.approx(s, abs=1e-12)


def test_km_csv(tmp_path):
    kaplan_meier(recs([1, 2, 3], [1, 0, 1])).to_csv(tmp_path / "km.csv")
    lines = (tmp_path / "km.csv").read_text().splitlines()
    assert lines[0] == "time,survival,at_risk,events"
    assert lines[1].split(",")[2:] == ["3", "1"]


# -- chi-square and log-rank -------------------------------------------------------


@pytest.mark.parametrize("x", [0.1, 1.0, 3.84, 6.63, 10.83])
def test_chi2_sf_grid_matches_oracles(x):
    assert abs(chi2_sf(x, 1) - chi2_sf_1dof(x)) <= 1e-8
    assert abs(chi2_sf(x, 1) - gammaincc(0.5, x / 2)) <= 1e-8


def test_chi2_threshold_semantics():
    assert chi2_sf(3.84) == pytest.approx(0.05, abs=1e-3)
    assert chi2_sf(6.63) == pytest.approx(0.01, abs=1e-4)
    assert chi2_sf(10.83) == pytest.approx(0.001, abs=1e-5)


@settings(max_examples=80, deadline=None)
@given(st.floats(0.1, 30), st.floats(0.0, 200))
def test_gamma_q_matches_scipy(a, x):
    assert abs(gamma_q(a, x) - gammaincc(a, x)) <= 1e-10


def test_logrank_identical_groups():
    g = recs([1, 2, 3, 4, 6], [1, 0, 1, 1, 0])
    assert log_rank_test(g, list(g)) == (0.0, 1.0)


def test_logrank_extreme_separation_matches_tabulation():
    a = recs([1] * 20, [1] * 20)
    b = recs([10] * 20, [0] * 20)
    stat, p = log_rank_test(a, b)
    oracle = logrank_tabulation([(1, True)] * 20, [(10, False)] * 20)
    assert stat == pytest.approx(oracle, rel=1e-12)
    assert stat == pytest.approx(39.0, rel=1e-12)  # (20 - 10)^2 / (20 * 0.5 * 0.5 * 20 / 39)
    assert p < 0.001


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(1, 15), st.booleans()), min_size=1, max_size=15),
    st.lists(st.tuples(st.integers(1, 15), st.booleans()), min_size=1, max_size=15),
)
def test_logrank_properties(a, b):
    ra, rb = [R(float(t), e) for t, e in a], [R(float(t), e) for t, e in b]
    stat, p = log_rank_test(ra, rb)
    stat2, p2 = log_rank_test(rb, ra)
    assert stat >= 0 and 0 < p <= 1
    assert stat == pytest.approx(stat2, rel=1e-12, abs=1e-15)
    if stat > 0:
        assert stat == pytest.approx(logrank_tabulation(a, b), rel=1e-10)


def test_logrank_empty_group():
    with pytest.raises(ValueError):
        log_rank_test([], recs([1], [1]))


# -- median split ---------------------------------------------------------------------


def test_median_split_basic():
    s = median_risk_split([1, 2, 3, 4])
    assert list(s.low) == [0, 1] and list(s.high) == [2, 3] and s.median == 2.5 and not s.degenerate


def test_median_split_degenerate():
    s = median_risk_split([0.3] * 5)
    assert list(s.low) == [0, 1, 2, 3, 4] and s.high.size == 0 and s.degenerate


def test_median_split_sizes_by_enumeration():
    for n in range(1, 9):
        for perm in itertools.permutations(range(n)):
            s = median_risk_split(np.array(perm, dtype=float))
            assert abs(s.low.size - s.high.size) <= 1
            assert s.low.size + s.high.size == n


def test_cohort_csv_roundtrip(tmp_path):
    ids = ["a", "b"]
    records = recs([1.5, 30.25], [1, 0])
    write_cohort_csv(tmp_path / "c.csv", ids, records, risks=[0.1, -2.0])
    i2, r2, risk = read_cohort_csv(tmp_path / "c.csv")
    assert i2 == ids and r2 == records and list(risk) == [0.1, -2.0]


def test_record_validation():
    with pytest.raises(ValueError):
        R(-1.0, True)
    with pytest.raises(ValueError):
        R(float("inf"), False)
