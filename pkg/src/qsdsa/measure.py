"""Probability measures used throughout the package.

Two representations are provided:

* :class:`DiscreteMeasure` -- a probability vector on ``{0, ..., m-1}``, used by
  the exact finite-state computations and the measure ODE.
* :class:`WeightedEmpiricalMeasure` -- the weighted occupation measure of a
  simulated chain, ``sum_k w_k delta_{x_k} / H_n``, backed by a Fenwick tree so
  that appending a particle and drawing one proportionally to its weight are
  both O(log n).

:class:`StepSchedule` produces the weights ``eta_n`` and the step sizes
``gamma_n = eta_n / H_n``.

Indexing convention: the occupation measure starts as ``delta_{X_0}`` and every
accepted state is appended immediately, i.e. it follows the recursion
``mu_{n+1} = (1 - gamma_{n+1}) mu_n + gamma_{n+1} delta_{X_{n+1}}``. The sum form
``(1/H_n) sum_k eta_k delta_{X_{k-1}}`` differs from this by a single index
shift, which does not affect limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SIMPLEX_TOL = 1e-12

# Rescale stored weights once the running total crosses this value.
_RESCALE_THRESHOLD = 1e300


class MeasureError(ValueError):
    """Invalid measure input (bad weights, non-finite points, ...)."""


class EmptyMeasureError(RuntimeError):
    """Raised when sampling from or integrating against an empty measure."""


# ---------------------------------------------------------------------------
# Finite-state measures
# ---------------------------------------------------------------------------


class DiscreteMeasure:
    """Probability vector on a finite state space.

    Construction validates the simplex invariants (entries >= 0, sum 1 within
    ``1e-12``). Use :meth:`normalized` to build one from arbitrary nonnegative
    masses.
    """

    __slots__ = ("weights",)

    def __init__(self, weights: Sequence[float] | np.ndarray, *, tol: float = SIMPLEX_TOL):
        w = np.array(weights, dtype=float).reshape(-1)
        if w.size == 0:
            raise MeasureError("a discrete measure needs at least one state")
        if not np.all(np.isfinite(w)):
            raise MeasureError("measure weights must be finite")
        if np.any(w < 0.0):
            raise MeasureError(f"negative mass {w.min():.3e} in discrete measure")
        s = w.sum()
        if abs(s - 1.0) > tol:
            raise MeasureError(f"weights sum to {s!r}, expected 1")
        w.flags.writeable = False
        self.weights = w

    @classmethod
    def normalized(cls, masses) -> "DiscreteMeasure":
        w = np.array(masses, dtype=float).reshape(-1)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MeasureError("masses must be finite and nonnegative")
        s = w.sum()
        if s <= 0:
            raise MeasureError("total mass must be positive")
        return cls(w / s, tol=1e-9)

    @classmethod
    def uniform(cls, m: int) -> "DiscreteMeasure":
        return cls(np.full(m, 1.0 / m))

    @classmethod
    def dirac(cls, m: int, i: int) -> "DiscreteMeasure":
        w = np.zeros(m)
        w[i] = 1.0
        return cls(w)

    @property
    def size(self) -> int:
        return self.weights.size

    def __len__(self) -> int:
        return self.weights.size

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.weights
        return self.weights.astype(dtype)

    def __repr__(self) -> str:
        return f"DiscreteMeasure({np.array2string(self.weights, precision=6)})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscreteMeasure):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)

    __hash__ = None  # type: ignore[assignment]


def as_probability(mu) -> np.ndarray:
    """Return ``mu`` as a float vector, accepting DiscreteMeasure or array-like."""
    if isinstance(mu, DiscreteMeasure):
        return mu.weights
    w = np.asarray(mu, dtype=float).reshape(-1)
    if w.size == 0 or np.any(w < -SIMPLEX_TOL) or abs(w.sum() - 1.0) > 1e-9:
        raise MeasureError("expected a probability vector")
    return w


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Clip negative entries at zero and renormalize."""
    w = np.clip(v, 0.0, None)
    return w / w.sum()


def tv_distance(p, q) -> float:
    """Total variation as ``sum_i |p_i - q_i|`` (so the maximum is 2)."""
    return float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


# ---------------------------------------------------------------------------
# Step schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepSchedule:
    """Weight sequence ``eta_n`` and its step sizes ``gamma_n = eta_n / H_n``.

    ``kind`` is one of

    ``"polynomial"``
        ``eta_n = n**alpha`` with ``alpha > -1``; ``alpha = 0`` gives
        ``gamma_n = 1/n``.
    ``"exponential"``
        ``eta_n = exp(n**alpha)`` with ``0 < alpha < 1``; weights grow
        super-polynomially and are handled in log space by the empirical
        measure.
    ``"constant-gamma"``
        ``gamma_n = alpha`` for ``n >= 2``. Violates ``gamma_n = o(1/log n)``;
        it exists so configurations can name it and be rejected by
        :meth:`validate`.
    """

    kind: str = "polynomial"
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "exponential", "constant-gamma"):
            raise MeasureError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant_weight(cls) -> "StepSchedule":
        return cls("polynomial", 0.0)

    def validate(self) -> None:
        """Reject schedules with ``H_n -> inf`` or ``gamma_n log n -> 0`` failing.

        Also requires ``sum gamma_n**2 < inf``, which all accepted kinds satisfy.
        """
        if self.kind == "polynomial":
            if not self.alpha > -1.0:
                raise MeasureError(
                    f"polynomial schedule needs alpha > -1 (got {self.alpha}): "
                    "H_n must diverge and gamma_n must be o(1/log n)"
                )
        elif self.kind == "exponential":
            if not 0.0 < self.alpha < 1.0:
                raise MeasureError(
                    f"exponential schedule needs 0 < alpha < 1 (got {self.alpha}) "
                    "so that gamma_n ~ alpha n^(alpha-1) = o(1/log n)"
                )
        else:
            raise MeasureError(
                "constant-gamma schedules are not allowed: the step sizes must "
                "satisfy H_n -> inf and gamma_n = o(1/log n)"
            )

    def log_eta(self, n: int) -> float:
        if n < 1:
            raise MeasureError("schedule index starts at n = 1")
        if self.kind == "polynomial":
            return self.alpha * math.log(n)
        if self.kind == "exponential":
            return float(n) ** self.alpha
        # constant gamma: eta_n = g/(1-g) * H_{n-1}, H_1 = 1 -> H_n = (1-g)^-(n-1)
        g = self.alpha
        if n == 1:
            return 0.0
        return math.log(g / (1.0 - g)) - (n - 2) * math.log1p(-g)

    def eta(self, n: int) -> float:
        return math.exp(self.log_eta(n))

    def log_total(self, n: int) -> float:
        """``log H_n``, computed stably by log-sum-exp."""
        if n < 1:
            raise MeasureError("schedule index starts at n = 1")
        if self.kind == "constant-gamma":
            return -(n - 1) * math.log1p(-self.alpha)
        if self.kind == "polynomial" and self.alpha == 0.0:
            return math.log(n)
        logs = np.array([self.log_eta(k) for k in range(1, n + 1)])
        top = logs.max()
        return float(top + math.log(np.exp(logs - top).sum()))

    def gamma(self, n: int) -> float:
        return gamma(self, n)

    def gammas(self, n: int) -> np.ndarray:
        """Vector ``(gamma_1, ..., gamma_n)`` computed by one pass."""
        if n < 1:
            raise MeasureError("need n >= 1")
        if self.kind == "polynomial" and self.alpha == 0.0:
            return 1.0 / np.arange(1, n + 1)
        out = np.empty(n)
        acc_log = -math.inf
        for k in range(n):
            a = self.log_eta(k + 1)
            m = max(acc_log, a)
            acc_log = m + math.log(math.exp(acc_log - m) + math.exp(a - m))
            out[k] = math.exp(a - acc_log)
        return out


def gamma(schedule: StepSchedule, n: int) -> float:
    """Step size ``gamma_n = eta_n / H_n``; ``gamma_1 = 1`` for every schedule."""
    if n < 1:
        raise MeasureError("gamma_n is defined for n >= 1")
    if n == 1:
        return 1.0
    if schedule.kind == "polynomial" and schedule.alpha == 0.0:
        return 1.0 / n
    if schedule.kind == "polynomial" and float(schedule.alpha).is_integer() and 0 < schedule.alpha <= 8:
        # exact integer arithmetic for small integer exponents
        a = int(schedule.alpha)
        num = n**a
        den = sum(k**a for k in range(1, n + 1))
        return num / den
    if schedule.kind == "constant-gamma":
        return schedule.alpha
    return math.exp(schedule.log_eta(n) - schedule.log_total(n))


# ---------------------------------------------------------------------------
# Fenwick tree
# ---------------------------------------------------------------------------


class FenwickTree:
    """Growable binary indexed tree of nonnegative floats.

    Supports append, point update, prefix sums and inverse-CDF search, all in
    O(log n). ``ops`` counts visited nodes so complexity can be checked.
    """

    __slots__ = ("_tree", "_n", "ops")

    def __init__(self, values: Sequence[float] = ()):
        self._tree = [0.0]
        self._n = 0
        self.ops = 0
        for v in values:
            self.append(v)

    def __len__(self) -> int:
        return self._n

    def append(self, value: float) -> None:
        tree = self._tree
        i = self._n + 1
        lo = i - (i & -i)
        s = value
        j = i - 1
        ops = 0
        while j > lo:
            s += tree[j]
            j -= j & -j
            ops += 1
        tree.append(s)
        self._n = i
        self.ops += ops + 1

    def add(self, index: int, delta: float) -> None:
        """Add ``delta`` to element ``index`` (0-based)."""
        tree = self._tree
        n = self._n
        i = index + 1
        ops = 0
        while i <= n:
            tree[i] += delta
            i += i & -i
            ops += 1
        self.ops += ops

    def prefix_sum(self, count: int) -> float:
        """Sum of the first ``count`` elements."""
        tree = self._tree
        s = 0.0
        i = count
        ops = 0
        while i > 0:
            s += tree[i]
            i -= i & -i
            ops += 1
        self.ops += ops
        return s

    def search(self, u: float) -> int:
        """Smallest 0-based index k with ``prefix_sum(k + 1) > u``."""
        tree = self._tree
        n = self._n
        pos = 0
        step = 1 << (n.bit_length() - 1) if n else 0
        ops = 0
        while step:
            nxt = pos + step
            if nxt <= n and tree[nxt] <= u:
                pos = nxt
                u -= tree[nxt]
            step >>= 1
            ops += 1
        self.ops += ops
        # rounding can push u past the last nonzero slot
        return min(pos, n - 1)

    def rebuild(self, values: np.ndarray) -> None:
        """Rebuild from scratch in O(n)."""
        n = len(values)
        tree = [0.0] + [float(v) for v in values]
        for i in range(1, n + 1):
            j = i + (i & -i)
            if j <= n:
                tree[j] += tree[i]
        self._tree = tree
        self._n = n


# ---------------------------------------------------------------------------
# Weighted empirical (occupation) measure
# ---------------------------------------------------------------------------


class WeightedEmpiricalMeasure:
    """Weighted occupation measure ``sum_k w_k delta_{x_k} / H_n``.

    Particles are append-only. The weighted first and second moments and an
    optional ``|x|**p`` moment are maintained incrementally so mean-field
    drifts and Lyapunov tracking cost O(1) per step.

    Weights are stored relative to ``exp(log_scale)``; when the running total
    exceeds ``1e300`` every weight is divided by the total and the tree is
    rebuilt.
    """

    def __init__(self, dim: int = 1, capacity: int = 1024, lyapunov_power: float | None = None):
        if dim < 1:
            raise MeasureError("dimension must be >= 1")
        self.dim = dim
        shape = (capacity,) if dim == 1 else (capacity, dim)
        self._states = np.empty(shape)
        self._weights = np.empty(capacity)
        self._n = 0
        self._tree = FenwickTree()
        self.total = 0.0
        self.log_scale = 0.0
        self._s1 = 0.0 if dim == 1 else np.zeros(dim)
        self._s2 = 0.0 if dim == 1 else np.zeros(dim)
        self.lyapunov_power = lyapunov_power
        self._sv = 0.0

    # -- construction -----------------------------------------------------

    @classmethod
    def from_particles(cls, states, weights=None, **kwargs) -> "WeightedEmpiricalMeasure":
        states = np.asarray(states, dtype=float)
        dim = 1 if states.ndim == 1 else states.shape[1]
        m = cls(dim=dim, capacity=max(len(states), 1), **kwargs)
        if weights is None:
            weights = np.ones(len(states))
        for x, w in zip(states, weights):
            m.append(x, w)
        return m

    def _grow(self) -> None:
        cap = 2 * len(self._weights)
        states = np.empty((cap,) + self._states.shape[1:])
        states[: self._n] = self._states[: self._n]
        weights = np.empty(cap)
        weights[: self._n] = self._weights[: self._n]
        self._states = states
        self._weights = weights

    def append(self, x, weight: float | None = None, *, log_weight: float | None = None) -> float:
        """Append particle ``x``; returns its stored weight in the current scale.

        Pass either ``weight`` (a positive real) or ``log_weight`` (its log, for
        weights that would overflow).
        """
        if log_weight is not None:
            if not math.isfinite(log_weight):
                raise MeasureError("log weight must be finite")
            w = math.exp(log_weight - self.log_scale)
        else:
            if weight is None or not (weight > 0.0) or not math.isfinite(weight):
                raise MeasureError(f"particle weight must be positive and finite, got {weight!r}")
            w = weight if self.log_scale == 0.0 else weight * math.exp(-self.log_scale)
        if self.dim == 1:
            x = float(x)
            if not math.isfinite(x):
                raise MeasureError(f"particle position must be finite, got {x!r}")
        else:
            x = np.asarray(x, dtype=float)
            if x.shape != (self.dim,) or not np.all(np.isfinite(x)):
                raise MeasureError(f"particle must be a finite vector of length {self.dim}")
        if self._n == len(self._weights):
            self._grow()
        i = self._n
        self._states[i] = x
        self._weights[i] = w
        self._n = i + 1
        self._tree.append(w)
        self.total += w
        self._s1 += w * x
        self._s2 += w * x * x
        if self.lyapunov_power is not None:
            self._sv += w * _power_norm(x, self.lyapunov_power)
        if self.total > _RESCALE_THRESHOLD:
            self._rescale()
        return float(self._weights[i])

    def _rescale(self) -> None:
        t = self.total
        self._weights[: self._n] /= t
        self._tree.rebuild(self._weights[: self._n])
        self.log_scale += math.log(t)
        self._s1 = self._s1 / t
        self._s2 = self._s2 / t
        self._sv /= t
        self.total = float(self._weights[: self._n].sum())

    # -- queries ----------------------------------------------------------

    def __len__(self) -> int:
        return self._n

    @property
    def states(self) -> np.ndarray:
        return self._states[: self._n]

    @property
    def weights(self) -> np.ndarray:
        """Stored (relative) weights; probabilities are ``weights / total``."""
        return self._weights[: self._n]

    @property
    def log_total(self) -> float:
        return math.log(self.total) + self.log_scale

    @property
    def fenwick_ops(self) -> int:
        return self._tree.ops

    def probabilities(self) -> np.ndarray:
        return self.weights / self.total

    def probability(self, k: int) -> float:
        return float(self._weights[k] / self.total)

    def mean(self):
        if self._n == 0:
            raise EmptyMeasureError("mean of an empty measure")
        return self._s1 / self.total

    def variance(self):
        m = self.mean()
        return np.maximum(self._s2 / self.total - m * m, 0.0)

    def lyapunov(self) -> float:
        """``mu(|x|**p)`` for the configured power."""
        if self.lyapunov_power is None:
            raise MeasureError("no Lyapunov power configured")
        if self._n == 0:
            raise EmptyMeasureError("empty measure")
        return self._sv / self.total

    def cumulative(self, k: int) -> float:
        """Mass of the first ``k`` particles, O(log n)."""
        return self._tree.prefix_sum(k) / self.total

    def sample_index(self, rng: np.random.Generator) -> int:
        if self._n == 0:
            raise EmptyMeasureError("cannot sample from an empty measure")
        return self._tree.search(rng.random() * self.total)

    def sample(self, rng: np.random.Generator):
        """Draw a particle with probability proportional to its weight."""
        k = self.sample_index(rng)
        x = self._states[k]
        return float(x) if self.dim == 1 else x.copy()

    def integrate(self, f: Callable) -> float:
        return integrate(self, f)


def _power_norm(x, p: float) -> float:
    if p == 0:
        return 1.0
    if isinstance(x, float):
        return abs(x) ** p
    return float(np.linalg.norm(x)) ** p


def update_occupation(m: WeightedEmpiricalMeasure, x, eta_next: float) -> WeightedEmpiricalMeasure:
    """Append ``x`` with weight ``eta_next`` in place and return ``m``."""
    m.append(x, eta_next)
    return m


def sample_particle(m: WeightedEmpiricalMeasure, rng: np.random.Generator):
    return m.sample(rng)


def integrate(m, f: Callable) -> float:
    """``mu(f)`` for a DiscreteMeasure (f over state indices) or empirical measure.

    ``f`` is applied elementwise; it may be vectorized or a plain scalar
    function.
    """
    if isinstance(m, WeightedEmpiricalMeasure):
        if len(m) == 0:
            raise EmptyMeasureError("integral against an empty measure")
        pts, w = m.states, m.weights
        total = m.total
    else:
        w = as_probability(m)
        pts = np.arange(w.size)
        total = 1.0
    vals = _apply(f, pts)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("test function is not finite on the support")
    return float(np.dot(w, vals) / total)


def _apply(f: Callable, pts: np.ndarray) -> np.ndarray:
    try:
        vals = np.asarray(f(pts), dtype=float)
        if vals.shape == (len(pts),):
            return vals
    except Exception:
        pass
    return np.array([f(p) for p in pts], dtype=float)
