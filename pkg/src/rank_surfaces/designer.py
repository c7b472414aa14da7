"""Sequential design loop for ranking response surfaces.

A run starts from a space-filling initial design split across surfaces,
then repeatedly draws a fresh Latin-hypercube candidate set, picks a
(location, surface) pair with the configured acquisition rule, samples it
(optionally in batches of ``r`` replicates), and conditions the chosen
surface's kriging model on the new batch mean.

Randomness comes from three independent streams spawned from the run seed:
candidate generation, the acquisition's own coin flips, and simulator noise.
Two methods run with the same seed therefore share simulator noise streams.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ranking
from .acquisition import AcquisitionSpec, select
from .gp import (
    FitResult,
    InsufficientDataError,
    KernelSpec,
    KrigingModel,
    ObservationSet,
    default_bounds,
    fit_hyperparameters,
    min_fit_size,
)
from .problems import Problem, batch_sample

log = logging.getLogger(__name__)

REFIT_SCHEDULES = ("never", "doubling")
NOISE_MODES = ("known", "batch_estimated")
INITIAL_DESIGNS = ("lhs", "lattice")


@dataclass(frozen=True)
class FitSettings:
    restarts: int = 5
    fit_nugget: bool = False
    trend: float | None = None  # None: generalized-least-squares intercept
    lengthscale_range: tuple[float, float] = (0.05, 5.0)  # multiples of the box width
    scale_range: tuple[float, float] = (1e-3, 1e2)  # multiples of the response variance
    nugget_range: tuple[float, float] = (1e-8, 1.0)
    form: str = "printed"  # kernel form of fitted surfaces


@dataclass(frozen=True)
class DesignerConfig:
    """Budget and policy of one sequential design run.

    ``initial_size`` and ``budget`` count design records (batches), not raw
    simulator calls.  ``trace_every`` controls how often the test-grid
    metrics are recorded (0 means only at the start and the end).
    """

    initial_size: int
    budget: int
    candidate_count: int = 100
    batch_size: int = 1
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    refit_schedule: str = "never"
    noise_mode: str = "known"
    stop_cost: float = 0.0
    seed: int = 0
    initial_design: str = "lhs"
    lattice_shape: tuple[int, ...] | None = None
    trace_every: int = 1
    fit: FitSettings = field(default_factory=FitSettings)

    def __post_init__(self):
        if self.initial_size < 1:
            raise ValueError("initial_size must be positive")
        if self.budget < self.initial_size:
            raise ValueError("budget must be at least initial_size")
        if self.candidate_count < 1:
            raise ValueError("candidate_count must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.refit_schedule not in REFIT_SCHEDULES:
            raise ValueError(f"refit_schedule must be one of {REFIT_SCHEDULES}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if self.noise_mode == "batch_estimated" and self.batch_size < 2:
            raise ValueError("batch_estimated noise needs batch_size >= 2")
        if self.stop_cost < 0:
            raise ValueError("stop_cost must be nonnegative")
        if self.initial_design not in INITIAL_DESIGNS:
            raise ValueError(f"initial_design must be one of {INITIAL_DESIGNS}")
        if self.initial_design == "lattice" and not self.lattice_shape:
            raise ValueError("lattice initial design needs lattice_shape")
        if self.trace_every < 0:
            raise ValueError("trace_every must be nonnegative")


@dataclass(frozen=True)
class DesignRecord:
    location: tuple[float, ...]
    surface: int
    sample_mean: float
    noise_variance: float
    batch_size: int
    step: int


@dataclass
class Design:
    L: int
    records: list[DesignRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def per_surface_counts(self) -> np.ndarray:
        counts = np.zeros(self.L, dtype=int)
        for r in self.records:
            counts[r.surface] += 1
        return counts

    def for_surface(self, ell: int) -> list[DesignRecord]:
        return [r for r in self.records if r.surface == ell]


@dataclass(frozen=True)
class TraceRow:
    k: int
    empirical_loss: float
    error_probability: float
    true_loss: float | None


@dataclass
class RunReport:
    design: Design
    trace: list[TraceRow]
    grid: np.ndarray
    classifier: np.ndarray
    m_gap: np.ndarray
    p_best: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    models: list[KrigingModel]
    nuggets: list[float]
    stopped_early: bool
    wall_time: float
    m_gap_clamped: int = 0

    @property
    def final(self) -> TraceRow:
        return self.trace[-1]

    @property
    def counts(self) -> np.ndarray:
        return self.design.per_surface_counts


def lhs_candidates(lower, upper, count: int, rng: np.random.Generator) -> np.ndarray:
    """Plain Latin hypercube: one uniform point per stratum, strata shuffled per axis."""
    if count < 1:
        raise ValueError("count must be at least 1")
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    d = lower.size
    strata = rng.permuted(np.tile(np.arange(count), (d, 1)), axis=1).T
    u = (strata + rng.random((count, d))) / count
    return lower + u * (upper - lower)


def snap_to_lattice(X: np.ndarray, lower, upper) -> np.ndarray:
    """Round to the integer lattice and drop duplicates, keeping first occurrences."""
    Y = np.clip(np.rint(X), lower, upper)
    _, idx = np.unique(Y, axis=0, return_index=True)
    return Y[np.sort(idx)]


def lattice_points(lower, upper, shape: Sequence[int], discrete: bool) -> np.ndarray:
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(lower, upper, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.column_stack([m.reshape(-1) for m in mesh])
    return np.rint(X) if discrete else X


def split_counts(total: int, weights: Sequence[float]) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` (largest remainder, ties to low index)."""
    w = np.asarray(weights, dtype=float)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(int)
    rem = total - base.sum()
    order = np.lexsort((np.arange(len(w)), -(raw - base)))
    base[order[:rem]] += 1
    return base


def _interleave(counts: Sequence[int]) -> list[int]:
    """Order surface labels so each surface's share is spread evenly."""
    keys = []
    for ell, n in enumerate(counts):
        keys.extend(((j + 0.5) / n, ell) for j in range(n))
    keys.sort()
    return [ell for _, ell in keys]


def stop_rule(losses: Sequence[float], stop_cost: float, steps: Sequence[int] | None = None,
              window: int = 5, rises: int = 3) -> bool:
    """Heuristic stop on ``L_k = EL_k + stop_cost * k``.

    Fires once the moving average (``window`` evaluations) of ``L_k`` has
    risen for ``rises`` consecutive evaluations.  ``stop_cost = 0`` disables.
    """
    if stop_cost <= 0 or len(losses) < 2:
        return False
    return first_stop_index(losses, stop_cost, steps, window, rises) is not None


def first_stop_index(losses, stop_cost, steps=None, window=5, rises=3) -> int | None:
    losses = np.asarray(losses, dtype=float)
    steps = np.arange(len(losses)) if steps is None else np.asarray(steps, dtype=float)
    if stop_cost <= 0 or len(losses) < window + rises:
        return None
    total = losses + stop_cost * steps
    ma = np.convolve(total, np.ones(window) / window, mode="valid")
    up = np.diff(ma) > 0
    run = 0
    for j, u in enumerate(up):
        run = run + 1 if u else 0
        if run >= rises:
            return j + window  # index into ``losses`` of the last evaluation used
    return None


class Designer:
    """Mutable driver for one run; see :func:`run` for the usual entry point."""

    def __init__(self, problem: Problem, config: DesignerConfig, kernels: Sequence[KernelSpec | None],
                 grid: np.ndarray | None = None, weights=None):
        if len(kernels) != problem.L:
            raise ValueError(f"need {problem.L} kernel entries, got {len(kernels)}")
        spec = config.acquisition
        if config.noise_mode == "known" and not problem.has_known_noise:
            raise ValueError(f"problem {problem.name!r} has no known noise; use batch_estimated")
        if spec.needs_truth and not problem.has_truth:
            raise ValueError(f"{spec.method} needs true surfaces, which {problem.name!r} lacks")
        if config.refit_schedule == "doubling" and all(k is not None for k in kernels):
            log.info("doubling refit requested but every kernel is fixed; nothing will be refit")
        self.problem = problem
        self.config = config
        self.spec = spec
        self.fixed = list(kernels)
        self.grid = problem.grid if grid is None else np.asarray(grid, dtype=float)
        if self.grid is None:
            raise ValueError("a test grid is required")
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.truth_grid = problem.truths(self.grid) if problem.has_truth else None
        ss = np.random.SeedSequence(config.seed)
        self.cand_rng, self.select_rng, self.sample_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        self.widths = problem.upper - problem.lower
        self.design = Design(problem.L)
        self.models: list[KrigingModel] = []
        self.nuggets = [0.0] * problem.L
        self.trace: list[TraceRow] = []
        self.stopped_early = False
        self.clamped = 0
        self._grid_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._queue: list[tuple[np.ndarray, int]] | None = None

    # -- sampling --------------------------------------------------------

    def _sample(self, x: np.ndarray, ell: int) -> tuple[float, float]:
        sampler = self.problem.samplers[ell]
        r = self.config.batch_size
        try:
            if self.config.noise_mode == "batch_estimated":
                return batch_sample(sampler, x, r, self.sample_rng)
            y = sampler.sample(x, self.sample_rng, r)
            sd = float(sampler.known_noise_sd(x[None, :])[0])
            return float(np.mean(y)), sd * sd / r
        except Exception as exc:
            raise type(exc)(f"sampling surface {ell} at x={x.tolist()} failed: {exc}") from exc

    def _record(self, x: np.ndarray, ell: int, step: int) -> DesignRecord:
        ybar, nv = self._sample(x, ell)
        rec = DesignRecord(tuple(float(v) for v in x), ell, ybar, nv, self.config.batch_size, step)
        self.design.records.append(rec)
        return rec

    # -- models ----------------------------------------------------------

    def _observations(self, ell: int) -> ObservationSet:
        recs = self.design.for_surface(ell)
        if not recs:
            return ObservationSet.empty(self.problem.dim)
        return ObservationSet(
            np.array([r.location for r in recs]),
            np.array([r.sample_mean for r in recs]),
            np.array([r.noise_variance for r in recs]),
        )

    def _fit(self, ell: int) -> KrigingModel:
        obs = self._observations(ell)
        fs = self.config.fit
        if len(obs) < min_fit_size(self.problem.dim):
            raise InsufficientDataError(
                f"surface {ell}: {len(obs)} observations, fitting needs {min_fit_size(self.problem.dim)}"
            )
        bounds = default_bounds(obs, self.widths, fs.lengthscale_range, fs.scale_range, fs.nugget_range)
        seed = int(np.random.SeedSequence([self.config.seed, ell, len(obs)]).generate_state(1)[0])
        res: FitResult = fit_hyperparameters(obs, bounds, fs.restarts, fs.fit_nugget, fs.trend, seed, form=fs.form)
        self.nuggets[ell] = res.nugget
        log.debug("surface %d refit at n=%d: %s", ell, len(obs), res.kernel)
        return KrigingModel(res.kernel, res.observations)

    def _build(self, ell: int) -> KrigingModel:
        if self.fixed[ell] is None:
            return self._fit(ell)
        return KrigingModel(self.fixed[ell], self._observations(ell))

    # -- noise for look-ahead scores -------------------------------------

    def _candidate_noise(self, X: np.ndarray) -> np.ndarray:
        r = self.config.batch_size
        out = np.empty((X.shape[0], self.problem.L))
        for ell, sampler in enumerate(self.problem.samplers):
            if self.config.noise_mode == "known":
                out[:, ell] = sampler.known_noise_sd(X) ** 2 / r
            else:
                recs = self.design.for_surface(ell)
                if recs:
                    locs = np.array([rc.location for rc in recs]) / self.widths_safe
                    nv = np.array([rc.noise_variance for rc in recs])
                    d2 = ((X / self.widths_safe)[:, None, :] - locs[None, :, :]) ** 2
                    out[:, ell] = nv[np.argmin(d2.sum(-1), axis=1)]
                else:
                    allnv = [rc.noise_variance for rc in self.design.records]
                    out[:, ell] = np.mean(allnv) if allnv else 0.0
            out[:, ell] += self.nuggets[ell]
        return out

    @property
    def widths_safe(self) -> np.ndarray:
        return np.where(self.widths > 0, self.widths, 1.0)

    # -- candidates ------------------------------------------------------

    def candidates(self) -> np.ndarray:
        X = lhs_candidates(self.problem.lower, self.problem.upper, self.config.candidate_count, self.cand_rng)
        if self.problem.discrete:
            X = snap_to_lattice(X, self.problem.lower, self.problem.upper)
        return X

    # -- phases ----------------------------------------------------------

    def _initial_points(self) -> list[tuple[np.ndarray, int]]:
        cfg, prob = self.config, self.problem
        L = prob.L
        if self.spec.method == "lhs":
            weights = self.spec.allocation or (1.0,) * L
            if len(weights) != L:
                raise ValueError(f"allocation needs {L} weights")
            counts = split_counts(cfg.budget, weights)
            per = [self._space_filling(n) for n in counts]
            used = [0] * L
            queue = []
            for ell in _interleave(counts):
                queue.append((per[ell][used[ell]], ell))
                used[ell] += 1
            self._queue = queue[cfg.initial_size:]
            return queue[: cfg.initial_size]
        if cfg.initial_design == "lattice":
            pts = lattice_points(prob.lower, prob.upper, cfg.lattice_shape, prob.discrete)
            if pts.shape[0] * L != cfg.initial_size:
                raise ValueError(
                    f"lattice of {pts.shape[0]} points per surface does not match initial_size {cfg.initial_size}"
                )
            per = [pts] * L
            counts = [pts.shape[0]] * L
        else:
            counts = split_counts(cfg.initial_size, [1.0] * L)
            per = [self._space_filling(n) for n in counts]
        out = []
        for j in range(max(counts)):
            for ell in range(L):
                if j < counts[ell]:
                    out.append((per[ell][j], ell))
        return out

    def _space_filling(self, n: int) -> np.ndarray:
        if n == 0:
            return np.empty((0, self.problem.dim))
        X = lhs_candidates(self.problem.lower, self.problem.upper, n, self.cand_rng)
        if self.problem.discrete:
            X = np.clip(np.rint(X), self.problem.lower, self.problem.upper)
        return X

    def initialize(self):
        for x, ell in self._initial_points():
            self._record(np.asarray(x, dtype=float), ell, 0)
        self.models = [self._build(ell) for ell in range(self.problem.L)]
        self._grid_cache.clear()
        self._trace()

    @property
    def k(self) -> int:
        return len(self.design)

    def step(self):
        cfg, L = self.config, self.problem.L
        k = self.k
        if self._queue is not None:
            x, ell = self._queue.pop(0)
            surfaces, x = [ell], np.asarray(x, dtype=float)
        else:
            X = self.candidates()
            posts = [m.posterior(X) for m in self.models]
            means = np.column_stack([p.mean for p in posts])
            variances = np.column_stack([p.variance for p in posts])
            noise = self._candidate_noise(X) if self.spec.needs_noise else None
            truth = self.problem.truths(X) if self.spec.needs_truth else None
            sel = select(self.spec, means, variances, k, self.select_rng, noise, truth)
            x = X[sel.index]
            surfaces = list(range(L)) if sel.surface is None else [sel.surface]
        for ell in surfaces:
            rec = self._record(x, ell, k)
            count = int(self.design.per_surface_counts[ell])
            if (cfg.refit_schedule == "doubling" and self.fixed[ell] is None
                    and count & (count - 1) == 0 and count >= min_fit_size(self.problem.dim)):
                self.models[ell] = self._fit(ell)
            else:
                self.models[ell] = self.models[ell].update(x, rec.sample_mean, rec.noise_variance + self.nuggets[ell])
            self._grid_cache.pop(ell, None)

    # -- metrics ---------------------------------------------------------

    def grid_posterior(self) -> tuple[np.ndarray, np.ndarray]:
        for ell, m in enumerate(self.models):
            if ell not in self._grid_cache:
                p = m.posterior(self.grid)
                self._grid_cache[ell] = (p.mean, p.variance)
        means = np.column_stack([self._grid_cache[e][0] for e in range(self.problem.L)])
        variances = np.column_stack([self._grid_cache[e][1] for e in range(self.problem.L)])
        return means, variances

    def _trace(self):
        means, variances = self.grid_posterior()
        mg, clamped = ranking.m_gap(means, variances, return_clamped=True)
        self.clamped += clamped
        w = ranking._weights(mg.shape[0], self.weights)
        el = float(w @ mg)
        ep = ranking.error_probability(means, variances, self.weights)
        tl = None
        if self.truth_grid is not None:
            tl = ranking.true_loss(ranking.classify(means), self.truth_grid, self.weights)
        self.trace.append(TraceRow(self.k, el, ep, tl))

    def _due(self, k: int) -> bool:
        every = self.config.trace_every
        return k >= self.config.budget or (every > 0 and k % every == 0)

    def run(self) -> RunReport:
        t0 = time.perf_counter()
        cfg = self.config
        L = self.problem.L
        self.initialize()
        while self.k < cfg.budget:
            if self.spec.concurrent and self.k + L > cfg.budget:
                break
            self.step()
            if self._due(self.k):
                self._trace()
                if cfg.stop_cost > 0 and stop_rule(
                    [t.empirical_loss for t in self.trace], cfg.stop_cost, [t.k for t in self.trace]
                ):
                    self.stopped_early = True
                    break
        if self.trace[-1].k != self.k:
            self._trace()
        means, variances = self.grid_posterior()
        probs = ranking.min_prob(means, variances)
        cls = ranking.classify(means)
        return RunReport(
            design=self.design,
            trace=self.trace,
            grid=self.grid,
            classifier=cls,
            m_gap=ranking.m_gap(means, variances),
            p_best=np.take_along_axis(probs, cls[:, None], axis=1)[:, 0],
            means=means,
            variances=variances,
            models=self.models,
            nuggets=self.nuggets,
            stopped_early=self.stopped_early,
            wall_time=time.perf_counter() - t0,
            m_gap_clamped=self.clamped,
        )


def initialize(config: DesignerConfig, problem: Problem, kernels) -> Designer:
    d = Designer(problem, config, kernels)
    d.initialize()
    return d


def run(config: DesignerConfig, problem: Problem, kernels, grid=None, weights=None) -> RunReport:
    """Initialize and iterate until the budget (or the stop rule) is reached."""
    return Designer(problem, config, kernels, grid, weights).run()
