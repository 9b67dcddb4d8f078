"""Exact computations for measure-dependent killed chains on finite spaces.

A *family* maps a probability vector ``mu`` to a sub-stochastic matrix
``K_mu`` (nonnegative entries, row sums <= 1). The row deficit
``delta_mu = 1 - K_mu 1`` is the one-step killing probability. From a family we
compute

* the fundamental kernel ``A_mu = sum_n K_mu^n = (I - K_mu)^{-1}``,
* the invariant law ``Pi_mu = mu A_mu / (mu A_mu 1)`` of the rebirth kernel
  ``KK_mu = K_mu + delta_mu mu``,
* QSDs as fixed points ``mu = Pi_mu``,
* solutions of the Poisson equation ``f - Pi_mu(f) = (I - KK_mu) g``,

plus numerical checkers for the uniform killing (H0), Doeblin minorization (H3)
and lower/upper kernel bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .measure import DiscreteMeasure, MeasureError, as_probability, tv_distance

__all__ = [
    "AssumptionViolation",
    "SubMarkovMatrixFamily",
    "ConstantFamily",
    "FunctionFamily",
    "MeanFieldFiniteKernel",
    "OracleReport",
    "measure_grid",
    "check_h0",
    "fundamental_kernel",
    "fundamental_kernel_series",
    "pi_map",
    "redistribution_matrix",
    "qsd_fixed_point",
    "find_qsds",
    "check_qsd_characterization",
    "survival_deviation",
    "poisson_solve",
    "poisson_series",
    "check_minorization",
    "check_lower_upper",
]

_ROW_TOL = 1e-12


class AssumptionViolation(RuntimeError):
    """A checked assumption (H0, minorization, lower/upper bound) fails."""


# ---------------------------------------------------------------------------
# Kernel families
# ---------------------------------------------------------------------------


class SubMarkovMatrixFamily:
    """Base class: ``family(mu)`` returns the m x m matrix ``K_mu``."""

    m: int

    def matrix(self, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, mu) -> np.ndarray:
        w = as_probability(mu)
        if w.size != self.m:
            raise MeasureError(f"measure has {w.size} states, family expects {self.m}")
        return self.matrix(w)

    def killing(self, mu) -> np.ndarray:
        """``delta_mu(i) = 1 - sum_j K_mu(i, j)``."""
        return np.clip(1.0 - self(mu).sum(axis=1), 0.0, 1.0)

    def validate(self, mu) -> np.ndarray:
        """Return ``K_mu`` after checking nonnegativity and row sums <= 1."""
        K = self(mu)
        if np.any(K < 0):
            raise AssumptionViolation("kernel has negative entries")
        if np.any(K.sum(axis=1) > 1.0 + _ROW_TOL):
            raise AssumptionViolation("kernel row sums exceed 1")
        return K

    def to_dict(self) -> dict:
        raise NotImplementedError


class ConstantFamily(SubMarkovMatrixFamily):
    """``K_mu = K`` for every ``mu``."""

    def __init__(self, K):
        K = np.array(K, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise MeasureError("kernel must be a square matrix")
        if np.any(K < 0) or np.any(K.sum(axis=1) > 1 + _ROW_TOL):
            raise MeasureError("kernel must be sub-stochastic")
        K.flags.writeable = False
        self.K = K
        self.m = K.shape[0]

    def matrix(self, mu):
        return self.K

    def to_dict(self):
        return {"type": "constant", "K": self.K.tolist()}


class FunctionFamily(SubMarkovMatrixFamily):
    """Family given by an arbitrary callable ``mu -> K_mu``."""

    def __init__(self, m: int, fn: Callable[[np.ndarray], np.ndarray]):
        self.m = m
        self.fn = fn

    def matrix(self, mu):
        return np.asarray(self.fn(mu), dtype=float)


class MeanFieldFiniteKernel(SubMarkovMatrixFamily):
    """``K_mu(i,j) = kappa P(i,j) exp(-beta mu_j) / z_i(mu)``.

    ``z_i(mu) = max(1, sum_j P(i,j) exp(-beta mu_j))`` keeps every row sum at
    most ``kappa``. Positive ``beta`` penalizes frequently visited states;
    negative ``beta`` makes the chain self-attracting (which can produce several
    QSDs).
    """

    def __init__(self, P, kappa: float, beta: float = 0.0):
        P = np.array(P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise MeasureError("P must be square")
        if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
            raise MeasureError("P must be a stochastic matrix")
        if not 0.0 < kappa < 1.0:
            raise MeasureError(f"kappa must lie in (0, 1), got {kappa}")
        if not math.isfinite(beta):
            raise MeasureError("beta must be finite")
        P.flags.writeable = False
        self.P = P
        self.kappa = float(kappa)
        self.beta = float(beta)
        self.m = P.shape[0]

    def matrix(self, mu):
        e = np.exp(-self.beta * mu)
        Q = self.P * e
        z = np.maximum(1.0, Q.sum(axis=1))
        return self.kappa * Q / z[:, None]

    def row(self, i: int, mu: np.ndarray) -> np.ndarray:
        q = self.P[i] * np.exp(-self.beta * mu)
        return self.kappa * q / max(1.0, q.sum())

    @classmethod
    def random(cls, m: int, kappa: float, beta: float, seed: int, floor: float = 0.05):
        """Instance with a strictly positive random transition matrix."""
        rng = np.random.default_rng(seed)
        P = rng.random((m, m)) + floor
        P /= P.sum(axis=1, keepdims=True)
        return cls(P, kappa, beta)

    def to_dict(self):
        return {"type": "mean-field", "P": self.P.tolist(), "kappa": self.kappa, "beta": self.beta}


def measure_grid(m: int, n_random: int = 20, seed: int = 0) -> list[DiscreteMeasure]:
    """Vertices, the barycenter and ``n_random`` Dirichlet(1) draws."""
    rng = np.random.default_rng(seed)
    grid = [DiscreteMeasure.dirac(m, i) for i in range(m)]
    grid.append(DiscreteMeasure.uniform(m))
    grid.extend(DiscreteMeasure.normalized(rng.dirichlet(np.ones(m))) for _ in range(n_random))
    return grid


# ---------------------------------------------------------------------------
# Assumption checkers
# ---------------------------------------------------------------------------


def check_h0(K: SubMarkovMatrixFamily, mu_grid: Sequence, L_max: int = 50) -> tuple[int, float]:
    """Smallest ``ell <= L_max`` with ``max row sum of K_mu^ell < 1`` over the grid.

    Returns ``(ell, rho)`` where ``rho`` is that maximum. Raises
    :class:`AssumptionViolation` when no such ``ell`` exists.
    """
    if L_max < 1:
        raise ValueError("L_max must be >= 1")
    mats = [K.validate(mu) for mu in mu_grid]
    if not mats:
        raise ValueError("empty measure grid")
    vecs = [np.ones(K.m) for _ in mats]
    for ell in range(1, L_max + 1):
        vecs = [M @ v for M, v in zip(mats, vecs)]
        rho = max(float(v.max()) for v in vecs)
        if rho < 1.0 - 1e-15:
            return ell, rho
    raise AssumptionViolation(f"H0 fails: K_mu^ell 1 reaches 1 for every ell <= {L_max}")


def check_minorization(K: SubMarkovMatrixFamily, mu_grid: Sequence, ell: int = 1):
    """Doeblin bound ``K_mu^ell(i, .) >= eps Psi`` uniformly on the grid.

    ``Psi`` is the normalized entrywise minimum of ``K_mu^ell`` over grid
    measures and rows; ``eps`` is the total mass of that minimum.
    """
    if ell < 1:
        raise ValueError("ell must be >= 1")
    if len(mu_grid) == 0:
        raise ValueError("empty measure grid")
    low = None
    for mu in mu_grid:
        Kl = np.linalg.matrix_power(K.validate(mu), ell)
        r = Kl.min(axis=0)
        low = r if low is None else np.minimum(low, r)
    eps = float(low.sum())
    if eps <= 0.0:
        raise AssumptionViolation(f"no minorization with ell={ell}: column minima all vanish")
    return eps, DiscreteMeasure.normalized(low)


def check_lower_upper(K: SubMarkovMatrixFamily, mu_grid: Sequence, psi) -> tuple[float, float]:
    """Constants with ``c1 Psi_j <= K_mu(i, j) <= c2 Psi_j`` on the grid.

    Sufficient condition for the ratio bound H4 on compositions. Raises if
    some ``K_mu(i, j) > 0`` where ``Psi_j = 0`` (``c2`` infinite) or if
    ``c1 = 0``.
    """
    if len(mu_grid) == 0:
        raise ValueError("empty measure grid")
    psi = as_probability(psi)
    pos = psi > 0
    c1, c2 = math.inf, 0.0
    for mu in mu_grid:
        M = K.validate(mu)
        if np.any(M[:, ~pos] > 0):
            raise AssumptionViolation("kernel charges a state where Psi vanishes: no upper bound")
        ratio = M[:, pos] / psi[pos]
        c1 = min(c1, float(ratio.min()))
        c2 = max(c2, float(ratio.max()))
    if c1 <= 0.0:
        raise AssumptionViolation("lower bound c1 = 0")
    return c1, c2


# ---------------------------------------------------------------------------
# Fundamental kernel and invariant law
# ---------------------------------------------------------------------------


def fundamental_kernel(K_mu) -> np.ndarray:
    """``(I - K_mu)^{-1}``; raises AssumptionViolation if the inverse does not exist."""
    K_mu = np.asarray(K_mu, dtype=float)
    m = K_mu.shape[0]
    I_K = np.eye(m) - K_mu
    try:
        A = np.linalg.solve(I_K, np.eye(m))
    except np.linalg.LinAlgError as exc:
        raise AssumptionViolation("I - K_mu is singular (no uniform killing)") from exc
    if not np.all(np.isfinite(A)) or np.any(A < -1e-9):
        raise AssumptionViolation("I - K_mu is numerically singular (no uniform killing)")
    return A


def fundamental_kernel_series(K_mu, N: int | None = None, tol: float = 1e-14, max_terms: int = 100_000):
    """Truncated series ``sum_{n=0}^{N} K^n``.

    With ``N=None`` terms are added until ``||K^n 1||_inf < tol``.
    Returns ``(A, terms_used)``.
    """
    K_mu = np.asarray(K_mu, dtype=float)
    m = K_mu.shape[0]
    term = np.eye(m)
    A = term.copy()
    n = 0
    limit = N if N is not None else max_terms
    while n < limit:
        term = term @ K_mu
        n += 1
        A += term
        if N is None and term.sum(axis=1).max() < tol:
            break
    else:
        if N is None:
            raise AssumptionViolation("series did not reach tolerance: no uniform killing")
    return A, n


def _pi(K_mu: np.ndarray, mu: np.ndarray) -> tuple[np.ndarray, float]:
    m = K_mu.shape[0]
    try:
        v = np.linalg.solve((np.eye(m) - K_mu).T, mu)
    except np.linalg.LinAlgError as exc:
        raise AssumptionViolation("I - K_mu is singular") from exc
    s = v.sum()
    if not s > 0 or not math.isfinite(s):
        raise FloatingPointError(f"normalizer mu A_mu 1 = {s!r} is not positive")
    return v / s, s


def pi_map(K: SubMarkovMatrixFamily, mu) -> DiscreteMeasure:
    """Invariant law ``Pi_mu = mu A_mu / (mu A_mu 1)`` of the rebirth kernel."""
    w = as_probability(mu)
    p, _ = _pi(K(w), w)
    return DiscreteMeasure.normalized(np.clip(p, 0.0, None))


def pi_vector(K: SubMarkovMatrixFamily, w: np.ndarray) -> np.ndarray:
    """Unvalidated fast path of :func:`pi_map` for plain vectors."""
    return _pi(K.matrix(w), w)[0]


def redistribution_matrix(K: SubMarkovMatrixFamily, mu) -> np.ndarray:
    """``KK_mu(i,j) = K_mu(i,j) + delta_mu(i) mu_j``; rows sum to one."""
    w = as_probability(mu)
    M = K(w)
    delta = 1.0 - M.sum(axis=1)
    return M + np.outer(delta, w)


# ---------------------------------------------------------------------------
# QSD fixed point
# ---------------------------------------------------------------------------


@dataclass
class OracleReport:
    """Result of the fixed-point search.

    ``extinction_rate`` is the lifetime parameter ``lambda = mu* K_{mu*} 1``:
    started from the QSD, ``P(tau > n) = lambda**n``. The per-step killing
    probability is ``kill_probability = 1 - lambda``.
    """

    qsd: DiscreteMeasure
    residual_tv: float
    extinction_rate: float
    iterations: int
    converged: bool

    @property
    def kill_probability(self) -> float:
        return 1.0 - self.extinction_rate

    def to_dict(self) -> dict:
        return {
            "qsd": self.qsd.weights.tolist(),
            "residual_tv": self.residual_tv,
            "extinction_rate": self.extinction_rate,
            "kill_probability": self.kill_probability,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def qsd_fixed_point(
    K: SubMarkovMatrixFamily,
    mu0,
    damping: float = 0.5,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> OracleReport:
    """Damped iteration ``mu <- (1 - damping) mu + damping Pi_mu``.

    Stops once ``||mu - Pi_mu||_TV < tol``. Non-convergence is reported through
    ``converged=False`` rather than raised, since a restart from another
    ``mu0`` may still succeed.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    mu = as_probability(mu0).copy()
    res = math.inf
    it = 0
    converged = False
    while it < max_iter:
        p, _ = _pi(K.matrix(mu), mu)
        res = tv_distance(mu, p)
        if res < tol:
            converged = True
            break
        mu = (1.0 - damping) * mu + damping * p
        mu = np.clip(mu, 0.0, None)
        mu /= mu.sum()
        it += 1
    qsd = DiscreteMeasure.normalized(mu)
    survival = float(qsd.weights @ K(qsd).sum(axis=1))
    return OracleReport(qsd, float(res), survival, it, converged)


def find_qsds(K: SubMarkovMatrixFamily, starts: Iterable, merge_tol: float = 1e-8, **kwargs) -> list[OracleReport]:
    """Run :func:`qsd_fixed_point` from every start and deduplicate the limits."""
    found: list[OracleReport] = []
    for s in starts:
        rep = qsd_fixed_point(K, s, **kwargs)
        if not rep.converged:
            continue
        if all(tv_distance(rep.qsd, r.qsd) > merge_tol for r in found):
            found.append(rep)
    return found


def survival_deviation(K: SubMarkovMatrixFamily, mu, n_max: int = 20) -> float:
    """``max_n |mu K^n 1 - (mu K 1)^n|`` for ``n = 1..n_max``.

    Vanishes exactly when the lifetime started from ``mu`` (with the
    interaction frozen at ``mu``) is geometric, as it is under a QSD.
    """
    w = as_probability(mu)
    M = K(w)
    lam = float(w @ M.sum(axis=1))
    row = w.copy()
    dev = 0.0
    for n in range(1, n_max + 1):
        row = row @ M
        dev = max(dev, abs(row.sum() - lam**n))
    return dev


def check_qsd_characterization(K: SubMarkovMatrixFamily, mu) -> float:
    """``|| mu K_mu - (mu K_mu 1) mu ||_TV``; zero iff ``mu`` is a QSD."""
    w = as_probability(mu)
    row = w @ K(w)
    return tv_distance(row, row.sum() * w)


# ---------------------------------------------------------------------------
# Poisson equation
# ---------------------------------------------------------------------------


def poisson_solve(K: SubMarkovMatrixFamily, mu, f) -> np.ndarray:
    """Solve ``(I - KK_mu) g = f - Pi_mu(f) 1`` with ``Pi_mu(g) = 0``.

    Uses the nonsingular system ``(I - KK_mu + 1 Pi_mu) g = f - Pi_mu(f) 1``.
    Raises AssumptionViolation if ``I - KK_mu`` has a null space of dimension
    greater than one (the invariant law is then not unique).
    """
    w = as_probability(mu)
    f = np.asarray(f, dtype=float)
    KK = redistribution_matrix(K, w)
    m = KK.shape[0]
    sv = np.linalg.svd(np.eye(m) - KK, compute_uv=False)
    if np.sum(sv < 1e-10 * max(1.0, sv[0])) > 1:
        raise AssumptionViolation("I - KK_mu has a multi-dimensional kernel: invariant law not unique")
    pi = pi_map(K, w).weights
    rhs = f - (pi @ f)
    return np.linalg.solve(np.eye(m) - KK + np.outer(np.ones(m), pi), rhs)


def poisson_series(K: SubMarkovMatrixFamily, mu, f, N: int) -> np.ndarray:
    """Truncated ``sum_{n=0}^{N-1} (KK_mu^n f - Pi_mu(f))``."""
    w = as_probability(mu)
    f = np.asarray(f, dtype=float)
    KK = redistribution_matrix(K, w)
    pf = float(pi_map(K, w).weights @ f)
    g = np.zeros_like(f)
    v = f.copy()
    for _ in range(N):
        g += v - pf
        v = KK @ v
    return g
