"""Limiting measure ODE on finite state spaces.

Two equivalent flows are integrated with fixed-step RK4:

* the QSD flow ``d nu/dt = -nu + Pi_nu`` whose zeros are the QSDs, and
* the almost-linear flow ``d mu/ds = mu A_mu - (mu A_mu 1) mu``.

They are linked by the time change ``nu_t = mu_{tau(t)}`` with
``tau'(t) = 1 / (mu_{tau(t)} A_{mu_{tau(t)}} 1)``. For a constant measure path
the propagator of ``phi' = phi A_mu`` is ``exp(s A_mu)``, which gives an
independent check of the RK4 machinery.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg.lapack import dgesv

from .measure import DiscreteMeasure, as_probability, tv_distance
from .oracle import SubMarkovMatrixFamily, fundamental_kernel

__all__ = [
    "StepSizeError",
    "OdePath",
    "qsd_vector_field",
    "linearized_vector_field",
    "integrate_qsd_ode",
    "integrate_linearized",
    "check_time_change_equivalence",
    "time_change_order",
    "propagator_series_check",
    "lifetime_bound",
]

# Max tolerated departure from the simplex before projection.
SIMPLEX_SLACK = 1e-6


class StepSizeError(RuntimeError):
    """An RK4 step left the simplex by more than the allowed slack."""


@dataclass
class OdePath:
    """Sampled solution of one of the measure flows.

    ``values[k]`` is the measure at ``times[k]``; ``residuals[k]`` is
    ``||values[k] - Pi_{values[k]}||_TV``. For the almost-linear flow,
    ``tau[k]`` holds ``tau(times[k])`` and ``derivatives`` the vector field at
    each sample (used for Hermite interpolation).
    """

    times: np.ndarray
    values: np.ndarray
    residuals: np.ndarray
    tau: Optional[np.ndarray] = None
    derivatives: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def terminal(self) -> DiscreteMeasure:
        return DiscreteMeasure.normalized(self.values[-1])

    @property
    def terminal_residual(self) -> float:
        return float(self.residuals[-1])

    def interpolate(self, s: float) -> np.ndarray:
        """Cubic Hermite interpolation in time (linear if no derivatives stored)."""
        t = self.times
        k = int(np.searchsorted(t, s, side="right")) - 1
        k = min(max(k, 0), len(t) - 2)
        dt = t[k + 1] - t[k]
        u = (s - t[k]) / dt
        y0, y1 = self.values[k], self.values[k + 1]
        if self.derivatives is None:
            return (1 - u) * y0 + u * y1
        d0, d1 = self.derivatives[k], self.derivatives[k + 1]
        u2, u3 = u * u, u * u * u
        return (
            (2 * u3 - 3 * u2 + 1) * y0
            + (u3 - 2 * u2 + u) * dt * d0
            + (-2 * u3 + 3 * u2) * y1
            + (u3 - u2) * dt * d1
        )

    def write_csv(self, path, header: str | None = None) -> None:
        """Columns: time, p_0..p_{m-1}, residual, tau (blank when absent)."""
        m = self.values.shape[1]
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["time", *(f"p_{i}" for i in range(m)), "residual", "tau"])
            for k, t in enumerate(self.times):
                tau = "" if self.tau is None else repr(float(self.tau[k]))
                w.writerow([repr(float(t)), *(repr(float(v)) for v in self.values[k]),
                            repr(float(self.residuals[k])), tau])


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------


def _mu_A(K: SubMarkovMatrixFamily, mu: np.ndarray) -> np.ndarray:
    """Row vector ``mu A_mu`` via one linear solve."""
    # raw LAPACK call: np.linalg.solve overhead dominates at m <= 10
    a = np.eye(mu.size) - K.matrix(mu)
    _, _, x, info = dgesv(a.T, mu)
    if info != 0:
        raise np.linalg.LinAlgError("I - K_mu is singular")
    return x


def qsd_vector_field(K: SubMarkovMatrixFamily, nu: np.ndarray) -> np.ndarray:
    """``-nu + Pi_nu``; its entries sum to zero."""
    v = _mu_A(K, nu)
    return v / v.sum() - nu


def linearized_vector_field(K: SubMarkovMatrixFamily, mu: np.ndarray) -> np.ndarray:
    """``mu A_mu - (mu A_mu 1) mu``."""
    v = _mu_A(K, mu)
    return v - v.sum() * mu


def _project(y: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise StepSizeError("iterate is not finite; reduce dt")
    if y.min() < -SIMPLEX_SLACK or abs(y.sum() - 1.0) > SIMPLEX_SLACK:
        raise StepSizeError(
            f"iterate left the simplex (min {y.min():.2e}, sum {y.sum():.12f}); reduce dt"
        )
    y = np.clip(y, 0.0, None)
    return y / y.sum()


def _rk4(field_fn, y0: np.ndarray, T: float, dt: float):
    if not dt > 0 or not T >= 0:
        raise ValueError("need dt > 0 and T >= 0")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be an integer multiple of dt")
    ys = np.empty((n + 1, y0.size))
    ds = np.empty((n + 1, y0.size))
    y = y0.copy()
    ys[0] = y
    for k in range(n):
        k1 = field_fn(y)
        ds[k] = k1
        k2 = field_fn(y + 0.5 * dt * k1)
        k3 = field_fn(y + 0.5 * dt * k2)
        k4 = field_fn(y + dt * k3)
        y = _project(y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        ys[k + 1] = y
    ds[n] = field_fn(y)
    return np.arange(n + 1) * dt, ys, ds


def _residuals(K, values) -> np.ndarray:
    return np.array([np.abs(qsd_vector_field(K, v)).sum() for v in values])


# ---------------------------------------------------------------------------
# Integrators
# ---------------------------------------------------------------------------


def integrate_qsd_ode(K: SubMarkovMatrixFamily, nu0, T: float, dt: float) -> OdePath:
    """RK4 for ``d nu/dt = -nu + Pi_nu`` with projection onto the simplex."""
    y0 = as_probability(nu0).astype(float)
    times, ys, ds = _rk4(lambda y: qsd_vector_field(K, y), y0, T, dt)
    res = np.abs(ds).sum(axis=1)
    return OdePath(times, ys, res, derivatives=ds)


def integrate_linearized(K: SubMarkovMatrixFamily, mu0, T: float, dt: float) -> OdePath:
    """RK4 for ``d mu/ds = mu A_mu - (mu A_mu 1) mu`` plus the time change.

    After the ``mu`` path is computed on the grid ``s_k = k dt``, ``tau`` is
    integrated on the same grid by RK4 on ``tau' = 1/(mu_tau A_{mu_tau} 1)``,
    reading ``mu_tau`` off the stored path with cubic Hermite interpolation
    (fourth order, matching RK4). Since ``tau' <= 1`` we have ``tau(t) <= t``,
    so the interpolation never leaves the computed range.
    """
    y0 = as_probability(mu0).astype(float)
    times, ys, ds = _rk4(lambda y: linearized_vector_field(K, y), y0, T, dt)
    path = OdePath(times, ys, _residuals(K, ys), derivatives=ds)

    def speed(s: float) -> float:
        mu = path.interpolate(min(s, times[-1]))
        mu = np.clip(mu, 0.0, None)
        mu /= mu.sum()
        return 1.0 / _mu_A(K, mu).sum()

    tau = np.empty_like(times)
    tau[0] = 0.0
    x = 0.0
    for k in range(len(times) - 1):
        k1 = speed(x)
        k2 = speed(x + 0.5 * dt * k1)
        k3 = speed(x + 0.5 * dt * k2)
        k4 = speed(x + dt * k3)
        x += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        tau[k + 1] = x
    path.tau = tau
    return path


def lifetime_bound(K: SubMarkovMatrixFamily, grid) -> float:
    """``c = max over grid of ||A_mu 1||_inf`` (so ``1/c <= tau' <= 1``)."""
    return max(float(fundamental_kernel(K(mu)).sum(axis=1).max()) for mu in grid)


def check_time_change_equivalence(K: SubMarkovMatrixFamily, nu0, T: float, dt: float) -> float:
    """``max_k ||nu_{t_k} - mu_{tau(t_k)}||_TV`` from two independent integrations."""
    nu_path = integrate_qsd_ode(K, nu0, T, dt)
    mu_path = integrate_linearized(K, nu0, T, dt)
    dev = 0.0
    for t_k, nu in zip(nu_path.times, nu_path.values):
        s = float(np.interp(t_k, mu_path.times, mu_path.tau))
        dev = max(dev, tv_distance(nu, mu_path.interpolate(s)))
    return dev


def time_change_order(K: SubMarkovMatrixFamily, nu0, T: float, dt: float) -> tuple[float, float, float]:
    """Deviation at ``dt`` and ``dt/2`` and the observed order ``log2`` of their ratio."""
    e1 = check_time_change_equivalence(K, nu0, T, dt)
    e2 = check_time_change_equivalence(K, nu0, T, dt / 2)
    order = math.log2(e1 / e2) if e2 > 0 else math.inf
    return e1, e2, order


def propagator_series_check(K: SubMarkovMatrixFamily, mu, t: float, N: int, dt: float = 1e-3) -> float:
    """Compare ``sum_{k<=N} t^k A^k / k!`` with RK4 for ``phi' = phi A``, ``phi_0 = I``.

    ``A = A_mu`` is frozen (constant measure path), so both sides approximate
    ``exp(t A_mu)``. Returns the max entrywise deviation.
    """
    w = as_probability(mu)
    A = fundamental_kernel(K(w))
    m = A.shape[0]
    series = np.eye(m)
    term = np.eye(m)
    for k in range(1, N + 1):
        term = term @ (t * A) / k
        series = series + term
    if t == 0:
        return float(np.abs(series - np.eye(m)).max())
    n = max(1, int(math.ceil(t / dt - 1e-9)))
    h = t / n
    phi = np.eye(m)
    for _ in range(n):
        k1 = phi @ A
        k2 = (phi + 0.5 * h * k1) @ A
        k3 = (phi + 0.5 * h * k2) @ A
        k4 = (phi + h * k3) @ A
        phi = phi + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return float(np.abs(series - phi).max())
