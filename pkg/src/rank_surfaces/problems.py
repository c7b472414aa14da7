"""Stochastic simulators for the benchmark ranking problems.

* ``toy1d``: two surfaces on [0, 1] with known Gaussian noise.
* ``synth2d``: five surfaces on [-2, 2]^2 with noise sd 0.5.
* ``sir``: expected outbreak cost with and without intervention in a
  stochastic SIR epidemic, sampled by exact Gillespie simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap if not (args and callable(args[0])) else args[0]


class Sampler:
    """A noisy simulator ``Y(x) = mu(x) + eps(x)`` for one surface."""

    name = "sampler"
    lower: np.ndarray
    upper: np.ndarray
    discrete = False

    def sample(self, x, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        raise NotImplementedError

    # optional capabilities; ``None`` when unavailable
    true_mean: Callable | None = None
    known_noise_sd: Callable | None = None

    def check_point(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != self.lower.shape:
            raise ValueError(f"{self.name}: expected a point of dimension {self.lower.size}, got {x.shape}")
        if np.any(x < self.lower - 1e-12) or np.any(x > self.upper + 1e-12):
            raise ValueError(f"{self.name}: point {x.tolist()} outside the domain")
        return x


@dataclass
class GaussianSampler(Sampler):
    """Known mean function plus homoscedastic Gaussian noise."""

    mean_fn: Callable[[np.ndarray], np.ndarray]
    noise_sd: float
    lower: np.ndarray
    upper: np.ndarray
    name: str = "gaussian"

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))

    def true_mean(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.lower.size)
        return self.mean_fn(X)

    def known_noise_sd(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.lower.size)
        return np.full(X.shape[0], self.noise_sd)

    def sample(self, x, rng, size=1):
        x = self.check_point(x)
        mu = float(self.mean_fn(x[None, :])[0])
        return mu + self.noise_sd * rng.standard_normal(size)


def batch_sample(sampler: Sampler, x, r: int, rng) -> tuple[float, float]:
    """Sample mean of ``r`` replicates and the estimated variance of that mean.

    The second value is the unbiased sample variance divided by ``r``.
    """
    if r < 2:
        raise ValueError("batch size must be at least 2 to estimate a variance")
    y = np.asarray(sampler.sample(x, rng, r), dtype=float)
    return float(y.mean()), float(y.var(ddof=1)) / r


# ---------------------------------------------------------------------------
# 1-D toy pair
# ---------------------------------------------------------------------------

TOY1D_ROOTS = (0.3193, 0.9279)


def toy1d_mean(X, ell: int) -> np.ndarray:
    x = np.asarray(X, dtype=float).reshape(-1)
    if ell == 0:
        return 0.625 * (np.sin(10 * x) / (1 + x) + 2 * x**3 * np.cos(5 * x) + 0.841)
    return np.full_like(x, 0.5)


def toy1d(ell: int, noise_sd: Sequence[float] = (0.2, 0.1)) -> GaussianSampler:
    """Surface ``ell`` (0 or 1) of the one-dimensional benchmark."""
    if ell not in (0, 1):
        raise ValueError("toy1d has surfaces 0 and 1")
    return GaussianSampler(lambda X, e=ell: toy1d_mean(X, e), float(noise_sd[ell]), [0.0], [1.0], f"toy1d[{ell}]")


# ---------------------------------------------------------------------------
# 2-D five-surface family
# ---------------------------------------------------------------------------

def _synth(ell):
    def f(X):
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        x1, x2 = X[:, 0], X[:, 1]
        if ell == 0:
            return 2 - x1**2 - 0.5 * x2**2
        if ell == 1:
            return 2 * (x1 - 1) ** 2 + 2 * x2**2 - 2
        if ell == 2:
            return 2 * np.sin(2 * x1) + 2
        if ell == 3:
            return 8 * (x1 - 1) ** 2 + 8 * x2**2 - 3
        return 0.5 * (x1 + 3) ** 2 + 16 * x2**2 - 6
    return f


SYNTH2D_NOISE_SD = 0.5

# Benchmark kernels, meant for the standard Matern-5/2 form.
# (lengthscale_1, lengthscale_2, signal variance, trend) per surface
SYNTH2D_KERNELS = (
    (4.0, 6.5, 23.0, -10.0),
    (7.5, 7.5, 475.0, 60.0),
    (1.0, 8.0, 2.0, 1.9),
    (8.0, 8.0, 8000.0, 300.0),
    (8.0, 4.0, 2500.0, 150.0),
)

# (lengthscale, signal variance, trend) per surface of the 1-D benchmark
TOY1D_KERNELS = ((0.18, 0.1, 0.5), (1.0, 0.1, 0.5))


def synth2d(ell: int, noise_sd: float = SYNTH2D_NOISE_SD) -> GaussianSampler:
    if ell not in range(5):
        raise ValueError("synth2d has surfaces 0..4")
    return GaussianSampler(_synth(ell), noise_sd, [-2.0, -2.0], [2.0, 2.0], f"synth2d[{ell}]")


# ---------------------------------------------------------------------------
# SIR epidemic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SirParams:
    population: int = 2000
    beta_no_action: float = 0.75
    beta_action: float = 0.5
    recovery: float = 0.5
    intervention_cost: float = 0.25

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("population must be positive")
        if min(self.beta_no_action, self.beta_action, self.recovery) <= 0:
            raise ValueError("SIR rates must be positive")
        if self.beta_action >= self.beta_no_action:
            raise ValueError("intervention must lower the contact rate (beta_action < beta_no_action)")
        if self.intervention_cost < 0:
            raise ValueError("intervention cost must be nonnegative")

    def beta(self, regime: str) -> float:
        if regime == "no_action":
            return self.beta_no_action
        if regime == "action":
            return self.beta_action
        raise ValueError(f"unknown regime {regime!r}")


@njit(cache=True)
def _gillespie(s, i, beta, gamma, M, rng):
    events = 0
    while i > 0:
        a1 = beta * s * i / M
        a2 = gamma * i
        a0 = a1 + a2
        rng.exponential(1.0 / a0)  # sojourn time; costs only need the jump chain
        if rng.random() * a0 < a1:
            s -= 1
            i += 1
        else:
            i -= 1
        events += 1
    return s, events


@njit(cache=True)
def _gillespie_many(s0, i0, beta, gamma, M, n, rng):
    out = np.empty(n, dtype=np.int64)
    for k in range(n):
        out[k] = _gillespie(s0, i0, beta, gamma, M, rng)[0]
    return out


def sir_trajectory(params: SirParams, regime: str, s0: int, i0: int, rng) -> tuple[int, int]:
    """Run one outbreak to extinction; returns ``(S_T, number of events)``."""
    s0, i0 = int(s0), int(i0)
    if s0 < 0 or i0 < 0 or s0 + i0 > params.population:
        raise ValueError(f"invalid SIR state (s={s0}, i={i0}) for population {params.population}")
    s, n = _gillespie(s0, i0, params.beta(regime), params.recovery, params.population, rng)
    return int(s), int(n)


def sir_trajectory_path(params: SirParams, regime: str, s0: int, i0: int, rng) -> np.ndarray:
    """Pure-Python reference SSA returning every visited ``(S, I)`` state."""
    beta, gamma, M = params.beta(regime), params.recovery, params.population
    s, i = int(s0), int(i0)
    path = [(s, i)]
    while i > 0:
        a1 = beta * s * i / M
        a0 = a1 + gamma * i
        rng.exponential(1.0 / a0)
        if rng.random() * a0 < a1:
            s, i = s - 1, i + 1
        else:
            i -= 1
        path.append((s, i))
    return np.array(path, dtype=np.int64)


SIR_BOX = ((1200, 0), (1800, 200))
SIR_GRID_STRIDE = (10, 5)


@dataclass
class SirCostSampler(Sampler):
    """Pathwise cost ``S_0 - S_T`` (plus ``C^I S_0`` under intervention)."""

    params: SirParams = field(default_factory=SirParams)
    regime: str = "no_action"
    lower: np.ndarray = field(default_factory=lambda: np.array(SIR_BOX[0], dtype=float))
    upper: np.ndarray = field(default_factory=lambda: np.array(SIR_BOX[1], dtype=float))
    discrete = True

    def __post_init__(self):
        self.params.beta(self.regime)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.name = f"sir[{self.regime}]"

    def sample(self, x, rng, size=1):
        x = self.check_point(x)
        if np.any(x != np.round(x)):
            raise ValueError(f"{self.name}: state {x.tolist()} is not a lattice point")
        s0, i0 = int(x[0]), int(x[1])
        if s0 + i0 > self.params.population:
            raise ValueError(f"{self.name}: s + i exceeds the population")
        p = self.params
        final = _gillespie_many(s0, i0, p.beta(self.regime), p.recovery, p.population, int(size), rng)
        cost = (s0 - final).astype(float)
        if self.regime == "action":
            cost += p.intervention_cost * s0
        return cost


def sir_cost_sampler(params: SirParams, regime: str, box=SIR_BOX) -> SirCostSampler:
    return SirCostSampler(params, regime, np.array(box[0], float), np.array(box[1], float))


# ---------------------------------------------------------------------------
# Problem registry
# ---------------------------------------------------------------------------


@dataclass
class Problem:
    """A family of ``L`` samplers over a common box."""

    name: str
    samplers: list[Sampler]
    lower: np.ndarray
    upper: np.ndarray
    labels: list[str]
    discrete: bool = False
    grid: np.ndarray | None = None

    @property
    def L(self) -> int:
        return len(self.samplers)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def has_truth(self) -> bool:
        return all(s.true_mean is not None for s in self.samplers)

    @property
    def has_known_noise(self) -> bool:
        return all(s.known_noise_sd is not None for s in self.samplers)

    def truths(self, X) -> np.ndarray:
        return np.column_stack([s.true_mean(X) for s in self.samplers])


def uniform_grid(lower, upper, points_per_axis) -> np.ndarray:
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(lower, upper, points_per_axis)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.reshape(-1) for m in mesh])


def lattice_grid(lower, upper, max_points: int = 4000, stride=None) -> np.ndarray:
    """Integer lattice in the box with per-axis ``stride``.

    Without a stride, a common stride is grown until at most ``max_points``
    remain.  An explicit stride must also respect ``max_points``.
    """
    lower = np.asarray(lower, dtype=int)
    upper = np.asarray(upper, dtype=int)
    if stride is None:
        step = 1
        while np.prod((upper - lower) // step + 1) > max_points:
            step += 1
        stride = [step] * lower.size
    stride = [int(v) for v in stride]
    if len(stride) != lower.size or min(stride) < 1:
        raise ValueError("stride needs one positive integer per axis")
    count = int(np.prod([(hi - lo) // st + 1 for lo, hi, st in zip(lower, upper, stride)]))
    if count > max_points:
        raise ValueError(f"lattice with stride {stride} has {count} points, more than {max_points}")
    axes = [np.arange(lo, hi + 1, st) for lo, hi, st in zip(lower, upper, stride)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.reshape(-1) for m in mesh]).astype(float)


def make_problem(name: str, params: dict | None = None) -> Problem:
    params = dict(params or {})
    if name == "toy1d":
        sd = params.pop("noise_sd", (0.2, 0.1))
        _no_extra(name, params)
        grid = (np.arange(1, 1001) / 1000.0).reshape(-1, 1)
        return Problem(name, [toy1d(0, sd), toy1d(1, sd)], np.array([0.0]), np.array([1.0]), ["1", "2"], grid=grid)
    if name == "synth2d":
        sd = float(params.pop("noise_sd", SYNTH2D_NOISE_SD))
        _no_extra(name, params)
        grid = uniform_grid([-2, -2], [2, 2], [51, 51])
        return Problem(name, [synth2d(k, sd) for k in range(5)], np.array([-2.0, -2.0]), np.array([2.0, 2.0]),
                       [str(k + 1) for k in range(5)], grid=grid)
    if name == "sir":
        box = params.pop("box", [list(SIR_BOX[0]), list(SIR_BOX[1])])
        max_grid = int(params.pop("max_grid_points", 4000))
        stride = params.pop("grid_stride", SIR_GRID_STRIDE)
        sp = SirParams(**params)
        lower, upper = np.array(box[0], float), np.array(box[1], float)
        samplers = [sir_cost_sampler(sp, "no_action", box), sir_cost_sampler(sp, "action", box)]
        return Problem(name, samplers, lower, upper, ["no_action", "action"], discrete=True,
                       grid=lattice_grid(lower, upper, max_grid, stride))
    raise ValueError(f"unknown problem {name!r}")


def _no_extra(name, params):
    if params:
        raise ValueError(f"unknown parameters for problem {name!r}: {sorted(params)}")
