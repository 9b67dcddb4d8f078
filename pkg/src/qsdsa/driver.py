"""The self-interacting chain and its run loop.

Each step draws ``X_{n+1}`` from the rebirth kernel of the current occupation
measure: a move is proposed through the sub-Markov kernel and, if it is killed,
the chain restarts from a point sampled from the occupation measure. The new
state is then appended to the occupation measure with the next schedule
weight.

Finite-state chains keep their occupation measure aggregated per state
(:class:`FiniteOccupation`); continuous models keep the particle list
(:class:`~qsdsa.measure.WeightedEmpiricalMeasure`).
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .euler import EulerModel, kernel_step
from .measure import (
    EmptyMeasureError,
    MeasureError,
    StepSchedule,
    WeightedEmpiricalMeasure,
)
from .oracle import MeanFieldFiniteKernel, SubMarkovMatrixFamily

__all__ = [
    "BufferedRandom",
    "FiniteOccupation",
    "FiniteStateModel",
    "RunConfig",
    "Snapshot",
    "RunResult",
    "StepError",
    "step",
    "run",
    "run_replicas",
    "lyapunov_track",
]

_BLOCK = 4096


class StepError(RuntimeError):
    """A kernel evaluation failed; carries the step index."""

    def __init__(self, n: int, cause: Exception):
        super().__init__(f"step {n}: {cause}")
        self.n = n


class BufferedRandom:
    """Scalar draws from a numpy Generator, fetched in fixed-size blocks.

    Exposes the scalar ``random``, ``standard_normal`` and
    ``standard_exponential`` calls used by the kernels, so it can stand in for
    the Generator itself. Block sizes are fixed, so a given seed always yields
    the same stream.
    """

    def __init__(self, seed_or_rng):
        if isinstance(seed_or_rng, np.random.Generator):
            self.generator = seed_or_rng
        else:
            self.generator = np.random.default_rng(seed_or_rng)
        self._u: list = []
        self._z: list = []
        self._e: list = []
        self._iu = self._iz = self._ie = 0

    def random(self, size=None):
        if size is not None:
            return self.generator.random(size)
        if self._iu == len(self._u):
            self._u = self.generator.random(_BLOCK).tolist()
            self._iu = 0
        v = self._u[self._iu]
        self._iu += 1
        return v

    def standard_normal(self, size=None):
        if size is not None:
            return self.generator.standard_normal(size)
        if self._iz == len(self._z):
            self._z = self.generator.standard_normal(_BLOCK).tolist()
            self._iz = 0
        v = self._z[self._iz]
        self._iz += 1
        return v

    def standard_exponential(self, size=None):
        if size is not None:
            return self.generator.standard_exponential(size)
        if self._ie == len(self._e):
            self._e = self.generator.standard_exponential(_BLOCK).tolist()
            self._ie = 0
        v = self._e[self._ie]
        self._ie += 1
        return v

    def digest(self) -> str:
        state = repr(self.generator.bit_generator.state) + f"|{self._iu}|{self._iz}|{self._ie}"
        return hashlib.sha256(state.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Finite-state chains
# ---------------------------------------------------------------------------


class FiniteOccupation:
    """Occupation measure of a finite-state chain, aggregated per state.

    Equivalent in law to the particle list: drawing a particle with
    probability ``eta_k / H_n`` and reading its state is the same as drawing a
    state with probability equal to its accumulated mass.
    """

    def __init__(self, m: int, lyapunov_power: float | None = None):
        self.m = m
        self.mass = np.zeros(m)
        self.total = 0.0
        self.log_scale = 0.0
        self.count = 0
        self.lyapunov_power = lyapunov_power
        self._idx = np.arange(m, dtype=float)

    def __len__(self) -> int:
        return self.count

    def append(self, i: int, weight: float | None = None, *, log_weight: float | None = None) -> float:
        if log_weight is not None:
            w = math.exp(log_weight - self.log_scale)
        else:
            if weight is None or not weight > 0 or not math.isfinite(weight):
                raise MeasureError(f"particle weight must be positive and finite, got {weight!r}")
            w = weight if self.log_scale == 0.0 else weight * math.exp(-self.log_scale)
        if not 0 <= i < self.m:
            raise MeasureError(f"state {i} outside 0..{self.m - 1}")
        self.mass[i] += w
        self.total += w
        self.count += 1
        if self.total > 1e300:
            t = self.total
            self.mass /= t
            self.log_scale += math.log(t)
            self.total = float(self.mass.sum())
            w /= t
        return w

    def vector(self) -> np.ndarray:
        return self.mass / self.total

    probabilities = vector

    def sample(self, rng) -> int:
        if self.count == 0:
            raise EmptyMeasureError("cannot sample from an empty measure")
        u = rng.random() * self.total
        k = int(np.searchsorted(np.cumsum(self.mass), u, side="right"))
        return min(k, self.m - 1)

    def mean(self) -> float:
        return float(self._idx @ self.mass / self.total)

    def variance(self) -> float:
        m = self.mean()
        return float(max((self._idx**2) @ self.mass / self.total - m * m, 0.0))

    def lyapunov(self) -> float:
        p = self.lyapunov_power
        if p is None:
            raise MeasureError("no Lyapunov power configured")
        if p == 0:
            return 1.0
        return float((self._idx**p) @ self.mass / self.total)


@dataclass
class FiniteStateModel:
    """Self-interacting chain driven by a sub-stochastic matrix family."""

    family: SubMarkovMatrixFamily
    name: str = "finite-state"

    @property
    def m(self) -> int:
        return self.family.m

    def row(self, i: int, mu: np.ndarray) -> np.ndarray:
        if isinstance(self.family, MeanFieldFiniteKernel):
            return self.family.row(i, mu)
        return self.family.matrix(mu)[i]

    def transition(self, i: int, occ: FiniteOccupation, rng) -> Optional[int]:
        """Next state under ``K_mu`` from ``i``, or ``None`` if killed."""
        row = self.row(i, occ.vector())
        u = rng.random()
        c = np.cumsum(row)
        if u >= c[-1]:
            return None
        return int(np.searchsorted(c, u, side="right"))


def _euler_transition(model: EulerModel):
    if model.dim != 1:
        return lambda x, occ, rng: kernel_step(model, x, occ, rng)
    # inlined 1-d proposal; same arithmetic as euler.propose
    drift, diffusion, h = model.drift, model.diffusion, model.h
    contains = model.domain.contains
    trunc = model.truncation
    noise = model.noise
    scale = noise.scale(h)
    gaussian = noise.kind == "gaussian"

    def transition(x, occ, rng):
        b = drift(x, occ)
        s = diffusion(x, occ)
        if not (math.isfinite(b) and math.isfinite(s)):
            raise ValueError(f"non-finite drift/diffusion at x={x!r}")
        det = x + h * b
        if trunc is not None:
            det = trunc._scalar(det)
        if gaussian:
            z = rng.standard_normal()
        else:
            from .euler import sample_stable

            z = sample_stable(noise.alpha, rng)
        y = det + s * scale * z
        return y if contains(y) else None

    return transition


def step(x, occ, model, eta_next: float, rng, transition=None):
    """One step of the self-interacting chain; returns ``(x_next, killed)``.

    ``occ`` is updated in place with ``x_next`` and weight ``eta_next``.
    """
    if transition is None:
        transition = model.transition if isinstance(model, FiniteStateModel) else _euler_transition(model)
    y = transition(x, occ, rng)
    killed = y is None
    if killed:
        y = occ.sample(rng)
    occ.append(y, eta_next)
    return y, killed


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    model: Union[FiniteStateModel, EulerModel]
    n_steps: int
    seed: int
    x0: object
    schedule: StepSchedule = field(default_factory=StepSchedule)
    snapshot_every: int = 1000
    lyapunov: Optional[float] = None
    hist_range: tuple = (-1.0, 1.0)
    hist_bins: int = 50

    def validate(self) -> None:
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.hist_bins < 1 or not self.hist_range[0] < self.hist_range[1]:
            raise ValueError("histogram needs bins >= 1 and lo < hi")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.schedule.validate()
        if isinstance(self.model, FiniteStateModel):
            if not 0 <= int(self.x0) < self.model.m:
                raise ValueError("x0 must be a state index")
        elif not self.model.domain.contains(self.x0):
            raise ValueError(f"x0={self.x0!r} is not in the domain")


@dataclass
class Snapshot:
    n: int
    kill_count: int
    gamma_n: float
    mean: float
    variance: float
    histogram: np.ndarray
    lyapunov_value: Optional[float]
    rng_digest: str

    def row(self) -> list:
        lv = "" if self.lyapunov_value is None else repr(self.lyapunov_value)
        return [self.n, repr(self.gamma_n), self.kill_count, repr(self.mean), repr(self.variance), lv,
                *(repr(float(v)) for v in self.histogram)]


@dataclass
class RunResult:
    config: RunConfig
    snapshots: list
    measure: Union[FiniteOccupation, WeightedEmpiricalMeasure]
    kill_count: int
    final_state: object

    @property
    def kill_series(self) -> np.ndarray:
        return np.array([(s.n, s.kill_count) for s in self.snapshots])

    def kill_rate(self, start_fraction: float = 0.5) -> float:
        """Kill frequency over the steps after ``start_fraction * n_steps``."""
        ks = self.kill_series
        n_total = ks[-1, 0]
        cut = start_fraction * n_total
        i = int(np.searchsorted(ks[:, 0], cut))
        n0, k0 = ks[i]
        if n_total == n0:
            return float("nan")
        return (ks[-1, 1] - k0) / (n_total - n0)


class _Histogram:
    """Incremental weighted histogram; points outside the range go to the end bins."""

    def __init__(self, lo: float, hi: float, bins: int):
        self.lo, self.hi, self.bins = lo, hi, bins
        self.width = (hi - lo) / bins
        self.counts = [0.0] * bins

    def add(self, x: float, w: float) -> None:
        k = int((x - self.lo) / self.width) if x > self.lo else 0
        self.counts[min(max(k, 0), self.bins - 1)] += w

    def scale(self, c: float) -> None:
        self.counts = [v * c for v in self.counts]


def histogram_from_particles(states, weights, lo: float, hi: float, bins: int) -> np.ndarray:
    """Reference (from-scratch) computation of the snapshot histogram."""
    x = np.asarray(states, dtype=float)
    if x.ndim > 1:
        x = x[:, 0]
    width = (hi - lo) / bins
    k = np.where(x > lo, ((x - lo) / width).astype(np.int64), 0)
    k = np.clip(k, 0, bins - 1)
    h = np.bincount(k, weights=weights, minlength=bins)
    return h / np.sum(weights)


def _first(v):
    return float(v) if np.ndim(v) == 0 else float(np.asarray(v).reshape(-1)[0])


def run(config: RunConfig) -> RunResult:
    """Run the chain for ``n_steps`` steps, recording periodic snapshots."""
    config.validate()
    model = config.model
    rng = BufferedRandom(int(config.seed))
    schedule = config.schedule
    finite = isinstance(model, FiniteStateModel)
    if finite:
        occ = FiniteOccupation(model.m, lyapunov_power=config.lyapunov)
        transition = model.transition
        x = int(config.x0)
        hist = None
    else:
        occ = WeightedEmpiricalMeasure(dim=model.dim, capacity=config.n_steps + 1,
                                       lyapunov_power=config.lyapunov)
        transition = _euler_transition(model)
        x = float(config.x0) if model.dim == 1 else np.asarray(config.x0, dtype=float)
        lo, hi = config.hist_range
        hist = _Histogram(lo, hi, config.hist_bins)
    first = float if finite or model.dim == 1 else _first

    unit = schedule.kind == "polynomial" and schedule.alpha == 0.0
    log_space = schedule.kind == "exponential"
    alpha = schedule.alpha

    def append(y, n_index):
        if unit:
            w = occ.append(y, 1.0)
        elif log_space:
            w = occ.append(y, log_weight=float(n_index) ** alpha)
        else:
            w = occ.append(y, math.exp(alpha * math.log(n_index)))
        if hist is not None:
            if occ.log_scale != hist_scale[0]:
                hist.scale(math.exp(hist_scale[0] - occ.log_scale))
                hist_scale[0] = occ.log_scale
            hist.add(first(y), w)
        return w

    hist_scale = [0.0]
    last_w = append(x, 1)
    kills = 0
    snapshots = []

    def snap(n):
        if finite:
            h = occ.vector().copy()
        else:
            h = np.array(hist.counts) / occ.total
        lyap = occ.lyapunov() if config.lyapunov is not None else None
        snapshots.append(Snapshot(
            n=n,
            kill_count=kills,
            gamma_n=last_w / occ.total,
            mean=float(first(occ.mean())),
            variance=float(first(occ.variance())),
            histogram=h,
            lyapunov_value=lyap,
            rng_digest=rng.digest(),
        ))

    snap(0)
    every = config.snapshot_every
    for n in range(1, config.n_steps + 1):
        try:
            y = transition(x, occ, rng)
        except Exception as exc:  # noqa: BLE001 - re-raised with the step index
            raise StepError(n, exc) from exc
        if y is None:
            kills += 1
            y = occ.sample(rng)
        last_w = append(y, n + 1)
        x = y
        if n % every == 0 or n == config.n_steps:
            snap(n)
    return RunResult(config, snapshots, occ, kills, x)


def run_replicas(config: RunConfig, replicas: int, max_workers: int | None = None) -> list[RunResult]:
    """Independent chains with seeds ``seed + r``, run on a thread pool."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    configs = [replace(config, seed=int(config.seed) + r) for r in range(replicas)]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(run, configs))


def lyapunov_track(result: RunResult) -> tuple[np.ndarray, np.ndarray]:
    """Series of ``mu_n(|x|^p)`` at the snapshots and its running maximum."""
    vals = np.array([s.lyapunov_value for s in result.snapshots], dtype=float)
    if np.any(np.isnan(vals)):
        raise MeasureError("run was configured without a Lyapunov power")
    return vals, np.maximum.accumulate(vals)


def tightness_ratio(result: RunResult) -> float:
    """``max over second half / max over first half - 1`` of ``mu_n(|x|^p)``."""
    vals, _ = lyapunov_track(result)
    ns = np.array([s.n for s in result.snapshots])
    half = ns[-1] / 2
    first = vals[ns <= half].max()
    second = vals[ns > half].max()
    return float(second / first - 1.0)
