"""Expected-improvement scores over candidate (location, surface) pairs and the
greedy / epsilon-greedy selection rule built on them.

Scores are computed from per-candidate posterior summaries: arrays of shape
``(D, L)`` holding kriging means, variances and (for look-ahead scores) the
noise variance a new sample at that pair would carry.  Larger is better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import ranking
from .gp import variance_after_self

METHODS = (
    "gap_sur",
    "gap_ucb",
    "gap_alc",
    "gamma_ent_ucb",
    "gamma_bvsb_ucb",
    "gamma_best_ucb",
    "conc_gamma",
    "pure_mgap",
    "two_step",
    "uniform",
    "known_gap_ucb",
    "lhs",
)
GAMMA_VARIANTS = ("ent", "bvsb", "best", "mgap")
_UCB_GAMMA = {"gamma_ent_ucb": "ent", "gamma_bvsb_ucb": "bvsb", "gamma_best_ucb": "best"}


@dataclass(frozen=True)
class AcquisitionSpec:
    """Acquisition rule configuration.

    ``ucb_scale`` is the constant ``c`` of the exploration weight
    ``c * sqrt(log k)``; a sequence gives one constant per surface.
    ``gamma_variant`` picks the location score of ``conc_gamma``.
    ``allocation`` gives relative per-surface budgets for the non-adaptive
    ``lhs`` design (equal by default).
    """

    method: str = "gap_sur"
    ucb_scale: float | tuple[float, ...] = 0.0
    epsilon: float = 0.0
    gamma_variant: str = "best"
    allocation: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown acquisition method {self.method!r}")
        c = np.atleast_1d(np.asarray(self.ucb_scale, dtype=float))
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ValueError("ucb_scale must be nonnegative")
        if isinstance(self.ucb_scale, (list, tuple, np.ndarray)):
            object.__setattr__(self, "ucb_scale", tuple(float(v) for v in c))
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.gamma_variant not in GAMMA_VARIANTS:
            raise ValueError(f"unknown gamma variant {self.gamma_variant!r}")
        if self.allocation is not None:
            a = tuple(float(v) for v in self.allocation)
            if any(v <= 0 for v in a):
                raise ValueError("allocation weights must be positive")
            object.__setattr__(self, "allocation", a)

    @property
    def concurrent(self) -> bool:
        return self.method == "conc_gamma"

    @property
    def needs_noise(self) -> bool:
        return self.method in ("gap_sur", "gap_alc")

    @property
    def needs_truth(self) -> bool:
        return self.method == "known_gap_ucb"


def gamma_schedule(spec: AcquisitionSpec, k: int) -> float | np.ndarray:
    """Exploration weight ``c * sqrt(log k)``; ``k`` below 2 is treated as 2."""
    k = max(float(k), 2.0)
    c = spec.ucb_scale
    root = math.sqrt(math.log(k))
    if isinstance(c, tuple):
        return np.asarray(c) * root
    return c * root


def gap_ucb_score(means, variances, gamma) -> np.ndarray:
    per, _ = ranking.gaps(means)
    return -per + np.asarray(gamma) * np.sqrt(variances)


def known_gap_ucb_score(true_means, variances, gamma) -> np.ndarray:
    per, _ = ranking.gaps(true_means)
    return -per + np.asarray(gamma) * np.sqrt(variances)


def gap_alc_score(means, variances, gamma, delta_after) -> np.ndarray:
    """``-gap_l + gamma * (sd now - sd after one more sample)``."""
    per, _ = ranking.gaps(means)
    decline = np.sqrt(variances) - np.asarray(delta_after)
    return -per + np.asarray(gamma) * decline


def gap_sur_score(means, variances, noise_vars) -> np.ndarray:
    """Expected one-step reduction of the M-gap from sampling each pair.

    The posterior means are unchanged in expectation and the variance of the
    sampled surface drops deterministically, so the score is the M-gap now
    minus the M-gap with that one variance replaced.
    """
    m = np.asarray(means, dtype=float)
    v = np.asarray(variances, dtype=float)
    nv = np.broadcast_to(np.asarray(noise_vars, dtype=float), m.shape)
    current = ranking.m_gap(m, v)
    out = np.empty_like(m)
    for ell in range(m.shape[-1]):
        v2 = v.copy()
        v2[..., ell] = variance_after_self(v[..., ell], nv[..., ell])
        out[..., ell] = current - ranking.m_gap(m, v2)
    return np.maximum(out, 0.0)


def gamma_score(means, variances, variant: str) -> np.ndarray:
    """Location score for the classification-complexity rules."""
    if variant == "mgap":
        return ranking.m_gap(means, variances)
    p = ranking.min_prob(means, variances)
    return ranking.gamma_score(means, p, variant)


def concurrent_score(means, variances, variant: str, gamma) -> np.ndarray:
    return gamma_score(means, variances, variant) + (np.asarray(gamma) * np.sqrt(variances)).sum(axis=-1)


class Selection(NamedTuple):
    index: int
    surface: int | None  # None means "sample every surface"


def _argmax_pair(scores: np.ndarray) -> tuple[int, int]:
    flat = int(np.argmax(scores))  # first occurrence: lowest candidate, then lowest surface
    return divmod(flat, scores.shape[1])


def score_pairs(spec: AcquisitionSpec, means, variances, k: int, noise_vars=None, true_means=None) -> np.ndarray:
    """Score table ``(D, L)`` for the pairwise rules."""
    gamma = gamma_schedule(spec, k)
    method = spec.method
    if method == "gap_sur":
        if noise_vars is None:
            raise ValueError("gap_sur needs noise variances")
        return gap_sur_score(means, variances, noise_vars)
    if method == "gap_ucb":
        return gap_ucb_score(means, variances, gamma)
    if method == "gap_alc":
        if noise_vars is None:
            raise ValueError("gap_alc needs noise variances")
        after = np.sqrt(variance_after_self(variances, noise_vars))
        return gap_alc_score(means, variances, gamma, after)
    if method in _UCB_GAMMA:
        g = gamma_score(means, variances, _UCB_GAMMA[method])
        return g[:, None] + np.asarray(gamma) * np.sqrt(variances)
    if method == "known_gap_ucb":
        if true_means is None:
            raise ValueError("known_gap_ucb needs the true surfaces")
        return known_gap_ucb_score(true_means, variances, gamma)
    raise ValueError(f"{method!r} does not score pairs")


def select(
    spec: AcquisitionSpec,
    means,
    variances,
    k: int,
    rng: np.random.Generator,
    noise_vars=None,
    true_means=None,
) -> Selection:
    """Pick the next (candidate index, surface) from posterior summaries."""
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if means.ndim != 2 or means.shape[0] == 0:
        raise ValueError("need a nonempty candidate set")
    D, L = means.shape
    method = spec.method
    if method == "lhs":
        raise ValueError("the non-adaptive lhs design does not select pairs")
    explore = method == "uniform" or (spec.epsilon > 0 and rng.random() < spec.epsilon)
    if explore:
        if spec.concurrent:
            return Selection(int(rng.integers(D)), None)
        i, ell = divmod(int(rng.integers(D * L)), L)
        return Selection(i, ell)
    if spec.concurrent:
        gamma = gamma_schedule(spec, k)
        return Selection(int(np.argmax(concurrent_score(means, variances, spec.gamma_variant, gamma))), None)
    if method == "pure_mgap":
        i = int(np.argmax(ranking.m_gap(means, variances)))
        return Selection(i, int(np.argmax(variances[i])))
    if method == "two_step":
        _, min_gap = ranking.gaps(means)
        i = int(np.argmax(-min_gap))
        return Selection(i, int(np.argmax(variances[i])))
    scores = score_pairs(spec, means, variances, k, noise_vars, true_means)
    return Selection(*_argmax_pair(scores))


def select_pair(
    spec: AcquisitionSpec,
    models: Sequence,
    candidates,
    k: int,
    rng: np.random.Generator,
    noise_vars=None,
    true_means=None,
) -> tuple[np.ndarray, int | None]:
    """Evaluate every model at the candidates and return ``(point, surface)``."""
    X = np.asarray(candidates, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, models[0].kernel.input_dim)
    if X.shape[0] == 0:
        raise ValueError("empty candidate set")
    posts = [m.posterior(X) for m in models]
    means = np.column_stack([p.mean for p in posts])
    variances = np.column_stack([p.variance for p in posts])
    sel = select(spec, means, variances, k, rng, noise_vars, true_means)
    return X[sel.index], sel.surface
