import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from qsdsa.analysis import (
    DensityOnGrid,
    GridMismatch,
    b_fixed_points,
    benchmark_qsd_exponents,
    bifurcation_threshold,
    distances,
    fixed_point_map,
    kde,
    pi_b_density,
    pi_b_normalizer,
    sample_pi_b,
    silverman_bandwidth,
    uniform_grid,
)
from qsdsa.measure import DiscreteMeasure, WeightedEmpiricalMeasure


# -- KDE --------------------------------------------------------------------


def test_single_particle_standard_normal():
    g = uniform_grid(-8, 8, 4001)
    d = kde(([0.0], [1.0]), bandwidth=1.0, grid=g)
    assert g[np.argmax(d.values)] == 0.0
    phi = np.exp(-0.5 * g**2) / math.sqrt(2 * math.pi)
    assert np.abs(d.values - phi).max() < 1e-8


def test_two_particles_bimodal_symmetric():
    g = uniform_grid(-2, 2, 401)
    d = kde(([-1.0, 1.0], [1.0, 1.0]), bandwidth=0.1, grid=g)
    assert np.abs(d.values - d.values[::-1]).max() < 1e-12
    assert d.values[200] < 1e-6
    assert d.mass() == pytest.approx(1.0, abs=1e-8)


def test_kde_rejects_bad_bandwidth():
    with pytest.raises(ValueError):
        kde(([0.0], [1.0]), bandwidth=0.0)
    with pytest.raises(ValueError):
        kde(([0.3, 0.3], [1.0, 1.0]))  # degenerate: Silverman gives zero
    with pytest.raises(ValueError):
        kde(([], []))


def test_kde_of_pi0_samples():
    rng = np.random.default_rng(0)
    x = sample_pi_b(0.0, 100_000, rng)
    d = kde((x, np.ones_like(x)))
    assert distances(d, pi_b_density(0.0))["l1"] < 0.05


def test_kde_accepts_empirical_measure():
    m = WeightedEmpiricalMeasure.from_particles([0.1, 0.2, -0.3], [1.0, 2.0, 3.0])
    a = kde(m, bandwidth=0.2)
    b = kde(([0.1, 0.2, -0.3], [1.0, 2.0, 3.0]), bandwidth=0.2)
    assert np.array_equal(a.values, b.values)


def test_binned_kde_close_to_exact():
    rng = np.random.default_rng(1)
    x = sample_pi_b(0.5, 50_000, rng)
    w = rng.random(x.size) + 0.5
    exact = kde((x, w), method="exact")
    binned = kde((x, w), method="binned")
    assert np.abs(exact.values - binned.values).max() < 1e-5


def test_silverman_effective_sample_size():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    # equal weights: n_eff = 4
    assert silverman_bandwidth(x, np.ones(4)) == pytest.approx(1.06 * np.std(x) * 4 ** -0.2)


# -- pi_b -------------------------------------------------------------------


def test_pi0_value_at_center():
    d = pi_b_density(0.0)
    assert d.values[1000] == pytest.approx(math.pi / 4, abs=1e-10)


def test_normalizer_closed_form():
    for b in (0.0, 0.7, -2.0, 5.0):
        exact = math.pi * math.cosh(b) / (math.pi**2 / 4 + b * b)
        assert pi_b_normalizer(b) == pytest.approx(exact, rel=1e-10)


@given(st.floats(-6, 6))
@settings(max_examples=30, deadline=None)
def test_pi_b_normalized(b):
    z = pi_b_normalizer(b)
    integral, _ = quad(lambda x: math.exp(b * x) * math.cos(math.pi * x / 2) / z, -1, 1, epsabs=1e-13)
    assert integral == pytest.approx(1.0, abs=1e-9)


@given(st.floats(-6, 6))
@settings(max_examples=30, deadline=None)
def test_pi_b_reflection(b):
    g = uniform_grid()
    assert np.abs(pi_b_density(b, g).values - pi_b_density(-b, g).values[::-1]).max() < 1e-12


def test_pi_b_mean_formula():
    # mean of pi_c is tanh(c) - 8c/(pi^2 + 4c^2): the self-consistency behind the fixed-point map
    for c in (0.3, 1.0, 2.5):
        z = pi_b_normalizer(c)
        m, _ = quad(lambda x: x * math.exp(c * x) * math.cos(math.pi * x / 2) / z, -1, 1, epsabs=1e-13)
        assert m == pytest.approx(math.tanh(c) - 8 * c / (math.pi**2 + 4 * c * c), abs=1e-10)


def test_pi_b_rejects_wide_grid():
    with pytest.raises(ValueError):
        pi_b_density(0.0, np.linspace(-2, 2, 11))


def test_sample_pi_b_chisquare():
    from scipy.stats import chisquare

    rng = np.random.default_rng(5)
    x = sample_pi_b(1.0, 100_000, rng)
    edges = np.linspace(-1, 1, 11)
    counts, _ = np.histogram(x, edges)
    z = pi_b_normalizer(1.0)
    probs = [quad(lambda t: math.exp(t) * math.cos(math.pi * t / 2) / z, a, b)[0] for a, b in zip(edges, edges[1:])]
    assert chisquare(counts, 100_000 * np.array(probs) / sum(probs)).pvalue > 0.01


# -- fixed points -----------------------------------------------------------


def test_zero_is_always_a_root():
    for g in (0.1, 0.5, 3.0, 8.0):
        assert 0.0 in b_fixed_points(g)
        assert fixed_point_map(0.0, g) == 0.0


def test_gamma_half_single_root():
    assert b_fixed_points(0.5) == [0.0]


def test_threshold_values():
    assert bifurcation_threshold(+1) == pytest.approx(0.55231, abs=1e-5)
    assert bifurcation_threshold(-1) == pytest.approx(5.27898, abs=1e-5)


def test_roots_appear_past_slope_threshold():
    # the map has slope gamma (1 - 8/pi^2) at 0
    assert len(b_fixed_points(5.2)) == 1
    roots = b_fixed_points(6.0)
    assert len(roots) == 3
    assert roots[2] == pytest.approx(0.40120, abs=1e-4)
    r = roots[2]
    assert abs(fixed_point_map(r, 6.0) - r) < 1e-11


@given(st.floats(0.05, 20.0))
@settings(max_examples=30, deadline=None)
def test_roots_symmetric_odd_count(gamma):
    roots = b_fixed_points(gamma, cells=20_000)
    assert len(roots) % 2 == 1
    assert np.allclose(roots, [-r for r in reversed(roots)], atol=0)


def test_exponents_scale_roots():
    assert benchmark_qsd_exponents(6.0) == [6.0 * m for m in b_fixed_points(6.0)]


def test_fixed_points_reject_nonpositive_gamma():
    with pytest.raises(ValueError):
        b_fixed_points(0.0)


# -- distances --------------------------------------------------------------


def test_identical_densities():
    d = pi_b_density(0.3)
    assert distances(d, d) == {"l1": 0.0, "tv": 0.0, "w1": 0.0, "ks": 0.0}


def test_point_masses_two_states():
    out = distances(DiscreteMeasure.dirac(2, 0), DiscreteMeasure.dirac(2, 1))
    assert out["tv"] == 2.0 and out["w1"] == 1.0 and out["ks"] == 1.0


def test_distances_grow_with_b():
    p0 = pi_b_density(0.0)
    ds = [distances(p0, pi_b_density(b)) for b in (0.1, 0.2, 0.4)]
    for key in ("l1", "w1", "ks"):
        assert ds[0][key] < ds[1][key] < ds[2][key]


def test_mismatch_rejected():
    with pytest.raises(GridMismatch):
        distances(pi_b_density(0.0, uniform_grid(-1, 1, 101)), pi_b_density(0.0))
    with pytest.raises(GridMismatch):
        distances(DiscreteMeasure.uniform(2), DiscreteMeasure.uniform(3))
    with pytest.raises(GridMismatch):
        distances(pi_b_density(0.0), DiscreteMeasure.uniform(3))


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
@settings(max_examples=40, deadline=None)
def test_w1_triangle_inequality(bs):
    g = uniform_grid(-1, 1, 401)
    p, q, r = (pi_b_density(b, g) for b in bs)
    assert distances(p, r)["w1"] <= distances(p, q)["w1"] + distances(q, r)["w1"] + 1e-12


def test_density_csv(tmp_path):
    d = DensityOnGrid(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    d.write_csv(tmp_path / "d.csv", header='{"a":1}')
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines == ['# {"a":1}', "x,f", "0.0,1.0", "1.0,1.0"]


def test_density_rejects_negative():
    with pytest.raises(ValueError):
        DensityOnGrid(np.array([0.0, 1.0]), np.array([1.0, -1.0]))
