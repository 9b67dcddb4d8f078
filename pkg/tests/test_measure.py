import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from qsdsa.measure import (
    DiscreteMeasure,
    EmptyMeasureError,
    FenwickTree,
    MeasureError,
    StepSchedule,
    WeightedEmpiricalMeasure,
    gamma,
    integrate,
    sample_particle,
    tv_distance,
    update_occupation,
)


# -- DiscreteMeasure --------------------------------------------------------


def test_discrete_measure_rejects_off_simplex():
    with pytest.raises(MeasureError):
        DiscreteMeasure([0.5, 0.6])
    with pytest.raises(MeasureError):
        DiscreteMeasure([1.2, -0.2])


def test_discrete_measure_weights_read_only():
    mu = DiscreteMeasure.uniform(3)
    with pytest.raises(ValueError):
        mu.weights[0] = 1.0


def test_tv_is_sum_of_abs_differences():
    assert tv_distance(DiscreteMeasure.dirac(2, 0), DiscreteMeasure.dirac(2, 1)) == 2.0


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=20).filter(lambda v: sum(v) > 1e-6))
def test_normalized_lands_on_simplex(v):
    w = DiscreteMeasure.normalized(v).weights
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) < 1e-12


# -- schedule ---------------------------------------------------------------


def test_gamma_constant_weight():
    s = StepSchedule.constant_weight()
    assert gamma(s, 10) == 0.1
    assert gamma(s, 1) == 1.0


def test_gamma_linear_weights():
    assert gamma(StepSchedule("polynomial", 1.0), 3) == 0.5


@pytest.mark.parametrize("sched", [StepSchedule("polynomial", 0.0), StepSchedule("polynomial", 2.5),
                                   StepSchedule("polynomial", -0.5), StepSchedule("exponential", 0.5)])
def test_gamma_one_is_one(sched):
    assert gamma(sched, 1) == 1.0


def test_gamma_rejects_zero():
    with pytest.raises(MeasureError):
        gamma(StepSchedule(), 0)


@pytest.mark.parametrize("alpha", [-0.5, 0.0, 1.0, 3.0])
def test_polynomial_gamma_nonincreasing_and_asymptotic(alpha):
    s = StepSchedule("polynomial", alpha)
    g = s.gammas(5000)
    assert np.all(np.diff(g) <= 1e-15)
    n = 5000
    # H_n ~ n^(1+alpha)/(1+alpha), so gamma_n ~ (1+alpha)/n
    assert g[-1] * n / (1 + alpha) == pytest.approx(1.0, rel=0.02)
    exact = n**alpha / sum(k**alpha for k in range(1, n + 1))
    assert g[-1] == pytest.approx(exact, rel=1e-10)
    assert g[-1] * math.log(n) < 0.01


def test_gammas_match_pointwise():
    s = StepSchedule("polynomial", 1.5)
    g = s.gammas(50)
    assert np.allclose(g, [gamma(s, n) for n in range(1, 51)], rtol=1e-12)


def test_schedule_validation():
    StepSchedule("polynomial", 0.0).validate()
    StepSchedule("exponential", 0.5).validate()
    with pytest.raises(MeasureError, match="constant-gamma"):
        StepSchedule("constant-gamma", 0.1).validate()
    with pytest.raises(MeasureError):
        StepSchedule("polynomial", -1.0).validate()
    with pytest.raises(MeasureError):
        StepSchedule("exponential", 1.0).validate()


# -- occupation measure -----------------------------------------------------


def test_first_particle_has_full_mass():
    m = update_occupation(WeightedEmpiricalMeasure(), 0.3, 1.0)
    assert m.probabilities().tolist() == [1.0]
    assert m.mean() == 0.3


def test_two_equal_particles():
    m = WeightedEmpiricalMeasure()
    update_occupation(m, 0.0, 1.0)
    update_occupation(m, 1.0, 1.0)
    assert m.probabilities().tolist() == [0.5, 0.5]


def test_linear_weights_after_three_updates():
    s = StepSchedule("polynomial", 1.0)
    m = WeightedEmpiricalMeasure()
    for n in range(1, 4):
        m.append(float(n), s.eta(n))
    assert m.probability(2) == pytest.approx(0.5, abs=1e-15)


def test_rejects_bad_particles():
    m = WeightedEmpiricalMeasure()
    with pytest.raises(MeasureError):
        m.append(math.nan, 1.0)
    with pytest.raises(MeasureError):
        m.append(0.0, 0.0)
    with pytest.raises(MeasureError):
        m.append(0.0, -1.0)


def test_empty_measure_sampling_is_state_error(rng):
    with pytest.raises(EmptyMeasureError):
        sample_particle(WeightedEmpiricalMeasure(), rng)


def test_single_particle_sampling(rng):
    m = WeightedEmpiricalMeasure.from_particles([0.7])
    assert all(sample_particle(m, rng) == 0.7 for _ in range(100))


def test_binomial_frequency_weights_1_3(rng):
    m = WeightedEmpiricalMeasure.from_particles([0.0, 1.0], [1.0, 3.0])
    n = 100_000
    hits = sum(m.sample_index(rng) for _ in range(n))
    sd = math.sqrt(0.75 * 0.25 / n)
    assert abs(hits / n - 0.75) < 3 * sd


def test_chisquare_weights_1_1_2():
    rng = np.random.default_rng(2024)
    m = WeightedEmpiricalMeasure.from_particles([0.0, 1.0, 2.0], [1.0, 1.0, 2.0])
    n = 100_000
    counts = np.bincount([m.sample_index(rng) for _ in range(n)], minlength=3)
    assert chisquare(counts, n * np.array([0.25, 0.25, 0.5])).pvalue > 0.01


def test_integrate_examples():
    assert integrate(DiscreteMeasure.dirac(3, 2), lambda i: i**2) == 4.0
    assert integrate(DiscreteMeasure.uniform(2), lambda i: i) == 0.5
    m = WeightedEmpiricalMeasure.from_particles([0.0, 1.0], [1.0, 3.0])
    assert integrate(m, lambda x: x) == 0.75


def test_integrate_propagates_nonfinite():
    m = WeightedEmpiricalMeasure.from_particles([0.0, 1.0])
    with np.errstate(divide="ignore"), pytest.raises(ArithmeticError):
        integrate(m, np.log)


@settings(max_examples=50, deadline=None)
@given(
    xs=st.lists(st.floats(-5, 5), min_size=1, max_size=60),
    alpha=st.sampled_from([0.0, 0.5, 1.0, 2.0]),
)
def test_recursion_matches_weighted_average(xs, alpha):
    s = StepSchedule("polynomial", alpha)
    m = WeightedEmpiricalMeasure()
    f = np.cos
    rec = None
    for n, x in enumerate(xs, start=1):
        m.append(x, s.eta(n))
        g = gamma(s, n)
        rec = f(x) if rec is None else (1 - g) * rec + g * f(x)
    direct = integrate(m, f)
    assert abs(direct - rec) <= 1e-10 * max(1.0, abs(direct))
    assert m.total == pytest.approx(m.weights.sum(), rel=1e-12)


def test_log_space_rescaling_keeps_probabilities():
    s = StepSchedule("exponential", 0.9)
    m = WeightedEmpiricalMeasure()
    n = 2000  # eta_n reaches exp(2000^0.9) ~ e^935, far beyond 1e300
    for k in range(1, n + 1):
        m.append(float(k), log_weight=s.log_eta(k))
    assert m.log_scale > 0
    assert np.all(np.isfinite(m.weights))
    assert m.probabilities().sum() == pytest.approx(1.0, abs=1e-12)
    assert m.probability(n - 1) == pytest.approx(gamma(s, n), rel=1e-9)


def test_incremental_moments_match_direct():
    rng = np.random.default_rng(1)
    xs = rng.normal(size=500)
    ws = rng.random(500) + 0.1
    m = WeightedEmpiricalMeasure.from_particles(xs, ws, lyapunov_power=3.0)
    p = ws / ws.sum()
    assert m.mean() == pytest.approx(p @ xs, abs=1e-12)
    assert m.variance() == pytest.approx(p @ (xs - p @ xs) ** 2, abs=1e-12)
    assert m.lyapunov() == pytest.approx(p @ np.abs(xs) ** 3, rel=1e-12)


def test_vector_particles():
    m = WeightedEmpiricalMeasure(dim=2)
    m.append([0.0, 1.0], 1.0)
    m.append([2.0, 3.0], 1.0)
    assert m.mean().tolist() == [1.0, 2.0]
    with pytest.raises(MeasureError):
        m.append([1.0], 1.0)


# -- Fenwick tree -----------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=200))
def test_fenwick_prefix_sums(values):
    t = FenwickTree(values)
    c = np.concatenate([[0.0], np.cumsum(values)])
    for k in range(len(values) + 1):
        assert t.prefix_sum(k) == pytest.approx(c[k], rel=1e-12, abs=1e-9)


def test_fenwick_search_inverts_cdf():
    vals = [1.0, 0.0, 2.0, 3.0]
    t = FenwickTree(vals)
    assert t.search(0.5) == 0
    assert t.search(1.0) == 2
    assert t.search(2.99) == 2
    assert t.search(3.0) == 3
    assert t.search(5.99) == 3


def test_fenwick_add():
    t = FenwickTree([1.0, 1.0, 1.0])
    t.add(1, 2.0)
    assert t.prefix_sum(2) == 4.0
    assert t.prefix_sum(3) == 5.0


@pytest.mark.parametrize("n", [1000, 100_000])
def test_fenwick_logarithmic_operation_count(n):
    t = FenwickTree()
    for _ in range(n):
        t.append(1.0)
    before = t.ops
    t.append(1.0)
    assert t.ops - before <= math.log2(n) + 2
    before = t.ops
    t.search(0.3 * n)
    assert t.ops - before <= math.log2(n) + 2
