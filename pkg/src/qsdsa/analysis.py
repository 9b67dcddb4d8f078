"""Post-processing: densities on grids, distances, and the benchmark's QSD family.

The benchmark is the Euler scheme of ``d xi = gamma E[xi | alive] dt + dW`` on
``(-1, 1)``. Its QSDs have densities ``pi_b(x) ~ exp(b x) cos(pi x / 2)``. The
mean of ``pi_b`` is ``tanh(b) - 8 b / (pi^2 + 4 b^2)``, so a QSD with drift
``gamma m`` must satisfy ``m = tanh(gamma m) - 8 gamma m / (4 gamma^2 m^2 + pi^2)``;
:func:`b_fixed_points` returns the roots ``m`` of that equation and
:func:`benchmark_qsd_exponents` the corresponding exponents ``b = gamma m``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .measure import WeightedEmpiricalMeasure, as_probability

__all__ = [
    "DensityOnGrid",
    "GridMismatch",
    "uniform_grid",
    "kde",
    "silverman_bandwidth",
    "pi_b_density",
    "pi_b_normalizer",
    "sample_pi_b",
    "fixed_point_map",
    "bifurcation_threshold",
    "b_fixed_points",
    "benchmark_qsd_exponents",
    "distances",
]


class GridMismatch(ValueError):
    """Densities or measures live on different grids / state spaces."""


@dataclass
class DensityOnGrid:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.shape != self.values.shape or self.grid.ndim != 1:
            raise ValueError("grid and values must be 1-d arrays of equal length")
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")

    def mass(self) -> float:
        return float(np.trapezoid(self.values, self.grid))

    def normalize(self) -> "DensityOnGrid":
        z = self.mass()
        if not z > 0:
            raise ValueError("cannot normalize a density with zero mass")
        return DensityOnGrid(self.grid, self.values / z)

    def cdf(self) -> np.ndarray:
        """Cumulative trapezoid integral, starting at zero."""
        dx = np.diff(self.grid)
        inc = 0.5 * (self.values[1:] + self.values[:-1]) * dx
        return np.concatenate([[0.0], np.cumsum(inc)])

    def write_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["x", "f"])
            for x, f in zip(self.grid, self.values):
                w.writerow([repr(float(x)), repr(float(f))])


def uniform_grid(a: float = -1.0, b: float = 1.0, n: int = 2001) -> np.ndarray:
    return np.linspace(a, b, n)


# ---------------------------------------------------------------------------
# Kernel density estimate
# ---------------------------------------------------------------------------


def silverman_bandwidth(x: np.ndarray, w: np.ndarray) -> float:
    """``1.06 sigma n_eff^(-1/5)`` with ``n_eff = (sum w)^2 / sum w^2``."""
    p = w / w.sum()
    mean = p @ x
    sd = math.sqrt(max(p @ (x - mean) ** 2, 0.0))
    n_eff = 1.0 / float(p @ p)
    return 1.06 * sd * n_eff ** (-0.2)


def _linear_bin(x: np.ndarray, p: np.ndarray, bw: float):
    """Spread each particle's mass onto the two nearest nodes of a fine lattice.

    The lattice spacing is ``bw / 50``; the induced density error is of order
    ``(spacing / bw)^2 / 12``, i.e. about 3e-5 relative.
    """
    lo, hi = float(x.min()), float(x.max())
    delta = bw / 50.0
    nodes = max(int(math.ceil((hi - lo) / delta)) + 1, 2)
    t = (x - lo) / delta
    k = np.minimum(np.floor(t).astype(np.int64), nodes - 2)
    frac = t - k
    mass = np.bincount(k, weights=p * (1.0 - frac), minlength=nodes)
    mass += np.bincount(k + 1, weights=p * frac, minlength=nodes)
    return lo + delta * np.arange(nodes), mass


def kde(m, bandwidth="auto", grid=None, chunk: int = 4096, method: str = "auto") -> DensityOnGrid:
    """Gaussian-kernel density of a weighted empirical measure, renormalized on the grid.

    ``m`` is a :class:`WeightedEmpiricalMeasure` (1-d) or a ``(states, weights)``
    pair. ``method="exact"`` sums the kernel over every particle;
    ``"binned"`` first linearly bins the particles onto a lattice of spacing
    ``bandwidth / 50``. ``"auto"`` bins when that lattice is smaller than the
    sample and the sample exceeds 20000 particles.
    """
    if isinstance(m, WeightedEmpiricalMeasure):
        if m.dim != 1:
            raise ValueError("kde supports one-dimensional measures only")
        x, w = m.states, m.weights
    else:
        x, w = (np.asarray(a, dtype=float) for a in m)
    if len(x) == 0:
        raise ValueError("kde of an empty measure")
    if method not in ("auto", "exact", "binned"):
        raise ValueError(f"unknown kde method {method!r}")
    grid = uniform_grid() if grid is None else np.asarray(grid, dtype=float)
    if isinstance(bandwidth, str):
        if bandwidth != "auto":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        bw = silverman_bandwidth(x, w)
        if bw == 0.0:
            raise ValueError("automatic bandwidth is zero (degenerate sample); pass one explicitly")
    else:
        bw = float(bandwidth)
        if not bw > 0:
            raise ValueError("bandwidth must be positive")
    p = w / w.sum()
    if method != "exact":
        span = (float(x.max()) - float(x.min())) * 50.0 / bw
        if method == "binned" or (len(x) > 20_000 and span < len(x)):
            x, p = _linear_bin(x, p, bw)
    vals = np.zeros_like(grid)
    norm = 1.0 / (bw * math.sqrt(2.0 * math.pi))
    for start in range(0, len(x), chunk):
        xs = x[start:start + chunk]
        ps = p[start:start + chunk]
        z = (grid[:, None] - xs[None, :]) / bw
        vals += np.exp(-0.5 * z * z) @ ps
    vals *= norm
    return DensityOnGrid(grid, vals).normalize()


# ---------------------------------------------------------------------------
# Benchmark QSD family
# ---------------------------------------------------------------------------


def _pi_b_unnormalized(b: float, x: np.ndarray) -> np.ndarray:
    return np.exp(b * x) * np.clip(np.cos(0.5 * np.pi * x), 0.0, None)


def pi_b_normalizer(b: float, points: int = 4001) -> float:
    """``int_{-1}^{1} exp(b x) cos(pi x / 2) dx`` by composite Simpson."""
    if points < 2001 or points % 2 == 0:
        raise ValueError("Simpson normalization needs an odd number of points >= 2001")
    x = np.linspace(-1.0, 1.0, points)
    return float(simpson(_pi_b_unnormalized(b, x), x=x))


def pi_b_density(b: float, grid=None) -> DensityOnGrid:
    """Density proportional to ``exp(b x) cos(pi x / 2)`` on ``[-1, 1]``.

    Values are exact pointwise (normalized by the quadrature constant), so the
    trapezoid mass on a coarse grid deviates from one by the trapezoid error.
    """
    grid = uniform_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.min() < -1.0 - 1e-12 or grid.max() > 1.0 + 1e-12:
        raise ValueError("grid must lie within [-1, 1]")
    return DensityOnGrid(grid, _pi_b_unnormalized(b, grid) / pi_b_normalizer(b))


def sample_pi_b(b: float, size: int, rng: np.random.Generator, points: int = 20001) -> np.ndarray:
    """Independent draws from ``pi_b`` by inverse-CDF on a fine tabulation."""
    x = np.linspace(-1.0, 1.0, points)
    d = DensityOnGrid(x, _pi_b_unnormalized(b, x))
    c = d.cdf()
    c /= c[-1]
    return np.interp(rng.random(size), c, x)


def fixed_point_map(b, gamma: float):
    """``tanh(gamma b) - 8 gamma b / (4 gamma^2 b^2 + pi^2)``."""
    b = np.asarray(b, dtype=float)
    return np.tanh(gamma * b) - 8.0 * gamma * b / (4.0 * gamma**2 * b**2 + np.pi**2)


def bifurcation_threshold(sign: int = +1) -> float:
    """``pi^2 / (pi^2 + 8)`` (``sign=+1``) or ``pi^2 / (pi^2 - 8)`` (``sign=-1``).

    The map above has slope ``gamma (1 - 8/pi^2)`` at zero, so nonzero roots
    appear once ``gamma`` exceeds the ``sign=-1`` value; the ``sign=+1`` value
    is the threshold usually quoted for this example.
    """
    return math.pi**2 / (math.pi**2 + sign * 8.0)


def b_fixed_points(gamma: float, B: float = 50.0, cells: int = 100_000, tol: float = 1e-12) -> list[float]:
    """All roots of ``G(b) = fixed_point_map(b) - b`` in ``[-B, B]``.

    Sign scan on ``cells`` cells, then bisection to ``tol``. ``G`` is odd, so
    0 is always a root and the returned list is symmetric.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")

    def G(b):
        return float(fixed_point_map(b, gamma)) - b

    # scan b > 0 only and mirror: G is odd
    edges = np.linspace(0.0, B, cells // 2 + 1)
    vals = fixed_point_map(edges, gamma) - edges
    roots = []
    for k in range(1, len(edges) - 1):
        lo, hi = edges[k], edges[k + 1]
        glo, ghi = vals[k], vals[k + 1]
        if glo == 0.0:
            roots.append(float(lo))
            continue
        if glo * ghi < 0:
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                gm = G(mid)
                if gm == 0.0:
                    lo = hi = mid
                    break
                if (gm < 0) == (glo < 0):
                    lo, glo = mid, gm
                else:
                    hi = mid
            roots.append(0.5 * (lo + hi))
    # roots closer to 0 than one cell (B / cells * 2) are not resolved
    pos = sorted(set(roots))
    return [-r for r in reversed(pos)] + [0.0] + pos


def benchmark_qsd_exponents(gamma: float) -> list[float]:
    """Exponents ``b = gamma m`` of the benchmark QSDs ``pi_b``, one per root ``m``."""
    return [gamma * m for m in b_fixed_points(gamma)]


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def distances(p, q) -> dict:
    """``l1``, ``tv``, ``w1`` and ``ks`` between two densities or two discrete measures.

    Densities must share their grid; discrete measures their state space. For
    discrete measures states are the integers ``0..m-1`` (unit spacing for
    ``w1``) and ``tv = l1 = sum |p_i - q_i|``.
    """
    if isinstance(p, DensityOnGrid) and isinstance(q, DensityOnGrid):
        if p.grid.shape != q.grid.shape or not np.allclose(p.grid, q.grid, rtol=0, atol=1e-12):
            raise GridMismatch("densities are defined on different grids")
        diff = np.abs(p.values - q.values)
        l1 = float(np.trapezoid(diff, p.grid))
        dc = np.abs(p.cdf() - q.cdf())
        return {"l1": l1, "tv": l1, "w1": float(np.trapezoid(dc, p.grid)), "ks": float(dc.max())}
    if isinstance(p, DensityOnGrid) or isinstance(q, DensityOnGrid):
        raise GridMismatch("cannot compare a density with a discrete measure")
    a, b = as_probability(p), as_probability(q)
    if a.size != b.size:
        raise GridMismatch("discrete measures on different state spaces")
    tv = float(np.abs(a - b).sum())
    dc = np.abs(np.cumsum(a) - np.cumsum(b))
    return {"l1": tv, "tv": tv, "w1": float(dc[:-1].sum()), "ks": float(dc.max())}
