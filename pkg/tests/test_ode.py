import csv

import numpy as np
import pytest

from conftest import instance
from qsdsa.measure import DiscreteMeasure, tv_distance
from qsdsa.ode import (
    StepSizeError,
    check_time_change_equivalence,
    integrate_linearized,
    integrate_qsd_ode,
    lifetime_bound,
    linearized_vector_field,
    propagator_series_check,
    qsd_vector_field,
)
from qsdsa.oracle import ConstantFamily, FunctionFamily, measure_grid, qsd_fixed_point


@pytest.fixture(scope="module")
def K():
    return instance(5, 0.8, 2.0, 1)


@pytest.fixture(scope="module")
def qsd(K):
    return qsd_fixed_point(K, DiscreteMeasure.uniform(5)).qsd


def test_vector_fields_tangent_to_simplex(K):
    rng = np.random.default_rng(0)
    for _ in range(20):
        nu = rng.dirichlet(np.ones(5))
        assert abs(qsd_vector_field(K, nu).sum()) < 1e-14
        assert abs(linearized_vector_field(K, nu).sum()) < 1e-13


def test_stationary_at_qsd(K, qsd):
    path = integrate_qsd_ode(K, qsd, T=10.0, dt=0.01)
    assert max(tv_distance(v, qsd) for v in path.values) < 1e-8
    lin = integrate_linearized(K, qsd, T=5.0, dt=0.01)
    assert max(tv_distance(v, qsd) for v in lin.values) < 1e-8


def test_scaled_identity_is_frozen():
    K = ConstantFamily(0.5 * np.eye(3))
    nu0 = DiscreteMeasure([0.2, 0.3, 0.5])
    path = integrate_qsd_ode(K, nu0, T=2.0, dt=0.1)
    assert np.abs(path.values - nu0.weights).max() < 1e-14


def test_generic_start_reaches_oracle(K, qsd):
    path = integrate_qsd_ode(K, DiscreteMeasure.dirac(5, 3), T=40.0, dt=0.05)
    assert path.terminal_residual < 1e-6
    assert tv_distance(path.terminal, qsd) < 1e-6


def test_residual_halves_over_time(K):
    path = integrate_qsd_ode(K, DiscreteMeasure.dirac(5, 0), T=20.0, dt=0.05)
    mid = len(path.times) // 2
    assert path.residuals[-1] <= path.residuals[mid]


def test_time_change_bounds(K):
    lin = integrate_linearized(K, DiscreteMeasure.dirac(5, 2), T=10.0, dt=0.01)
    c = lifetime_bound(K, measure_grid(5, 50, 0))
    slopes = np.diff(lin.tau) / np.diff(lin.times)
    assert np.all(slopes > 0)
    assert slopes.max() <= 1.0 + 1e-12
    assert slopes.min() >= 1.0 / c - 1e-12


def test_equivalence_stationary_start(K, qsd):
    assert check_time_change_equivalence(K, qsd, T=2.0, dt=0.01) < 1e-12


def test_equivalence_coarse_grid_fourth_order(K):
    nu0 = DiscreteMeasure.dirac(5, 0)
    e1 = check_time_change_equivalence(K, nu0, T=10.0, dt=0.1)
    e2 = check_time_change_equivalence(K, nu0, T=10.0, dt=0.05)
    assert e1 / e2 >= 8.0


def test_step_size_error_when_leaving_simplex():
    # a vector field that pushes mass off the simplex quickly
    K = FunctionFamily(2, lambda mu: np.array([[0.0, 0.99], [0.0, 0.0]]))
    with pytest.raises(StepSizeError):
        integrate_qsd_ode(K, DiscreteMeasure([0.999999, 0.000001]), T=50.0, dt=25.0)


def test_dt_must_divide_T(K):
    with pytest.raises(ValueError):
        integrate_qsd_ode(K, DiscreteMeasure.uniform(5), T=1.0, dt=0.3)


def test_propagator_zero_time(K):
    assert propagator_series_check(K, DiscreteMeasure.uniform(5), 0.0, 10) == 0.0


def test_propagator_identity_generator():
    # K = I/2 gives A = 2I; exp(t A) = e^{2t} I
    K = ConstantFamily(0.5 * np.eye(2))
    assert propagator_series_check(K, DiscreteMeasure.uniform(2), 0.5, 30, dt=1e-3) < 1e-10


def test_propagator_builtin():
    K = instance(5, 0.5, 1.0, 2)
    assert propagator_series_check(K, DiscreteMeasure.uniform(5), 2.0, 40, dt=1e-4) < 1e-8


def test_path_csv(tmp_path, K):
    lin = integrate_linearized(K, DiscreteMeasure.uniform(5), T=0.2, dt=0.1)
    p = tmp_path / "path.csv"
    lin.write_csv(p, header='{"seed":null}')
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# ")
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["time", "p_0", "p_1", "p_2", "p_3", "p_4", "residual", "tau"]
    assert len(rows) == 4
    assert float(rows[-1][-1]) == pytest.approx(lin.tau[-1])


def test_hermite_interpolation_exact_at_nodes(K):
    lin = integrate_linearized(K, DiscreteMeasure.dirac(5, 1), T=1.0, dt=0.1)
    for k in (0, 3, 10):
        assert np.allclose(lin.interpolate(lin.times[k]), lin.values[k], atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_step_is_step_size_error(K):
    with pytest.raises(StepSizeError):
        integrate_qsd_ode(K, DiscreteMeasure.dirac(5, 0), T=50.0, dt=25.0)
