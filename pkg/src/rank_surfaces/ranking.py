"""Ranking statistics from L independent Gaussian posteriors.

All functions are vectorized: ``means`` and ``variances`` have shape
``(..., L)`` where the last axis indexes surfaces.  Surface indices are
0-based.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

from .gp import NumericalError

INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
VARIANCE_FLOOR = 1e-12

# Gauss-Legendre rule used on each panel of the min-probability integral.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)
_PANEL_OFFSETS = np.array([-8.5, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.5])


class PosteriorAtPoint(NamedTuple):
    means: np.ndarray
    variances: np.ndarray


class RankingSummary(NamedTuple):
    classifier_index: np.ndarray
    gap_per_surface: np.ndarray
    min_gap: np.ndarray
    min_probs: np.ndarray
    min_mean: np.ndarray
    m_gap: np.ndarray


def _pdf(z):
    return INV_SQRT2PI * np.exp(-0.5 * z * z)


def _check(means, variances=None):
    m = np.asarray(means, dtype=float)
    if m.shape[-1] < 2:
        raise ValueError("need at least two surfaces")
    if variances is None:
        return m
    v = np.asarray(variances, dtype=float)
    if v.shape != m.shape:
        raise ValueError("means and variances must have the same shape")
    if np.any(v < 0):
        raise ValueError("variances must be nonnegative")
    return m, v


def classify(means) -> np.ndarray:
    """Index of the smallest posterior mean (lowest index on ties)."""
    return np.argmin(_check(means), axis=-1)


def gaps(means) -> tuple[np.ndarray, np.ndarray]:
    """Per-surface gaps ``|mu_l - min_{j != l} mu_j|`` and the best/second-best gap."""
    m = _check(means)
    s = np.sort(m, axis=-1)
    first, second = s[..., :1], s[..., 1:2]
    # min over the other surfaces is the overall min, except for the argmin itself
    is_min = np.arange(m.shape[-1]) == np.argmin(m, axis=-1)[..., None]
    other_min = np.where(is_min, second, first)
    return np.abs(m - other_min), np.abs(s[..., 0] - s[..., 1])


def min_prob_two(means, variances) -> np.ndarray:
    """Closed-form ``P(M_l = min)`` for two surfaces."""
    m, v = _check(means, variances)
    if m.shape[-1] != 2:
        raise ValueError("min_prob_two needs exactly two surfaces")
    diff = m[..., 1] - m[..., 0]
    d = np.sqrt(v[..., 0] + v[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        p1 = np.where(d > 0, ndtr(diff / np.where(d > 0, d, 1.0)), np.where(diff > 0, 1.0, np.where(diff < 0, 0.0, 0.5)))
    return np.stack([p1, 1.0 - p1], axis=-1)


def _floored_variances(m, v):
    scale = np.maximum(np.max(np.abs(m), axis=-1, keepdims=True), 1.0)
    return np.maximum(v, VARIANCE_FLOOR * scale * scale)


def contrast_matrix(ell: int, L: int) -> np.ndarray:
    """The ``(L-1, L)`` matrix mapping ``M`` to ``M_ell - M_j`` for ``j != ell``."""
    A = np.zeros((L - 1, L))
    A[:, ell] = 1.0
    others = [j for j in range(L) if j != ell]
    A[np.arange(L - 1), others] = -1.0
    return A


def min_prob_product(means, variances) -> np.ndarray:
    """Product form ``prod_j Phi(-r_j)`` with ``r = (A D A^T)^{-1/2} A mu``.

    Exact for two surfaces.  For three or more the whitened contrasts do not
    map orthants to orthants and this is only an approximation (it gives 1/4
    rather than 1/3 for three identical posteriors); :func:`min_prob` uses
    numerical integration instead.
    """
    m, v = _check(means, variances)
    L = m.shape[-1]
    flat_m = m.reshape(-1, L)
    flat_v = _floored_variances(flat_m, v.reshape(-1, L))
    out = np.empty_like(flat_m)
    for ell in range(L):
        A = contrast_matrix(ell, L)
        C = np.einsum("ij,nj,kj->nik", A, flat_v, A)
        w, U = np.linalg.eigh(C)
        bad = ~(w[:, 0] > 0)
        if np.any(bad):
            raise NumericalError(f"singular contrast covariance for surface {ell} at point {int(np.argmax(bad))}")
        inv_sqrt = np.einsum("nij,nj,nkj->nik", U, 1.0 / np.sqrt(w), U)
        r = np.einsum("nij,nj->ni", inv_sqrt, flat_m @ A.T)
        out[:, ell] = np.prod(ndtr(-r), axis=-1)
    return out.reshape(m.shape)


def _min_prob_quadrature(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``p_l = int phi_l(t) prod_{j != l} P(M_j > t) dt`` by panel Gauss-Legendre.

    Panel breakpoints sit at fixed multiples of every surface's standard
    deviation around its mean, so both narrow densities and near-step
    survival functions are resolved.
    """
    n, L = m.shape
    sd = np.sqrt(v)
    bp = (m[:, :, None] + sd[:, :, None] * _PANEL_OFFSETS).reshape(n, -1)
    bp.sort(axis=1)
    a, b = bp[:, :-1], bp[:, 1:]
    half = 0.5 * (b - a)
    t = (a + half)[:, :, None] + half[:, :, None] * _GL_NODES  # (n, P, q)
    w = half[:, :, None] * _GL_WEIGHTS
    t = t.reshape(n, -1)
    w = w.reshape(n, -1)
    z = (t[:, None, :] - m[:, :, None]) / sd[:, :, None]  # (n, L, T)
    surv = ndtr(-z)
    dens = _pdf(z) / sd[:, :, None]
    others = np.empty_like(surv)
    for ell in range(L):
        others[:, ell, :] = np.delete(surv, ell, axis=1).prod(axis=1)
    p = np.einsum("nlt,nt->nl", dens * others, w)
    return np.clip(p, 0.0, 1.0)


def min_prob(means, variances) -> np.ndarray:
    """Posterior probability that each surface is the minimal one.

    Closed form for two surfaces; for more, a one-dimensional integral over
    the value of the candidate minimum evaluated by panel quadrature.
    """
    m, v = _check(means, variances)
    L = m.shape[-1]
    if L == 2:
        return min_prob_two(m, v)
    flat_m = m.reshape(-1, L)
    flat_v = _floored_variances(flat_m, v.reshape(-1, L))
    if not (np.all(np.isfinite(flat_m)) and np.all(np.isfinite(flat_v))):
        bad = int(np.argmax(~np.isfinite(flat_m + flat_v).all(axis=1)))
        raise NumericalError(f"non-finite posterior at point {bad}")
    return _min_prob_quadrature(flat_m, flat_v).reshape(m.shape)


def min_moments_two(mu1, var1, mu2, var2) -> tuple[np.ndarray, np.ndarray]:
    """First and second moments of ``min(M1, M2)`` for independent Gaussians."""
    mu1, var1, mu2, var2 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu1, var1, mu2, var2)))
    d = np.sqrt(var1 + var2)
    pos = d > 0
    safe_d = np.where(pos, d, 1.0)
    a = (mu1 - mu2) / safe_d
    Pm, Pp, ph = ndtr(-a), ndtr(a), _pdf(a)
    mean = mu1 * Pm + mu2 * Pp - d * ph
    second = (mu1 * mu1 + var1) * Pm + (mu2 * mu2 + var2) * Pp - (mu1 + mu2) * d * ph
    lo = np.minimum(mu1, mu2)
    mean = np.where(pos, mean, lo)
    second = np.where(pos, second, lo * lo)
    return mean, second


def min_mean(means, variances) -> np.ndarray:
    """Expected minimum ``m = E[min_l M_l]``.

    Exact for two surfaces.  For more, surfaces are folded in index order,
    replacing the running minimum by a moment-matched Gaussian each time.
    """
    m, v = _check(means, variances)
    cur_m, cur_v = m[..., 0], v[..., 0]
    for ell in range(1, m.shape[-1]):
        mean, second = min_moments_two(cur_m, cur_v, m[..., ell], v[..., ell])
        cur_m, cur_v = mean, np.maximum(second - mean * mean, 0.0)
    return cur_m


def m_gap(means, variances, return_clamped: bool = False):
    """``M = min_l mu_l - E[min_l M_l]``, clamped at zero.

    With ``return_clamped`` also returns how many entries were negative before
    clamping (only possible from the L > 2 approximation or rounding).
    """
    m, v = _check(means, variances)
    raw = np.min(m, axis=-1) - min_mean(m, v)
    out = np.maximum(raw, 0.0)
    if return_clamped:
        return out, int(np.count_nonzero(raw < 0))
    return out


def summarize(means, variances) -> RankingSummary:
    m, v = _check(means, variances)
    per, mn = gaps(m)
    return RankingSummary(classify(m), per, mn, min_prob(m, v), min_mean(m, v), m_gap(m, v))


def _weights(n: int, weights) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != n:
        raise ValueError(f"expected {n} weights, got {w.shape[0]}")
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError("weights must be a probability vector")
    return w


def empirical_loss(means, variances, weights=None) -> float:
    """Weighted average M-gap over a test grid (``means`` of shape ``(n, L)``)."""
    mg = m_gap(means, variances)
    return float(_weights(mg.shape[0], weights) @ mg)


def true_loss(classifier, truths, weights=None) -> float:
    """Weighted average of ``mu_{C_hat(x)}(x) - min_l mu_l(x)``."""
    truths = np.asarray(truths, dtype=float)
    c = np.asarray(classifier, dtype=int)
    if truths.shape[0] != c.shape[0]:
        raise ValueError("classifier and truths must cover the same grid")
    chosen = np.take_along_axis(truths, c[:, None], axis=1)[:, 0]
    regret = chosen - truths.min(axis=1)
    return float(_weights(c.shape[0], weights) @ regret)


def error_probability(means, variances, weights=None, probs=None) -> float:
    """Weighted mean of ``1 - p_{C_hat(x)}(x)``."""
    m = np.asarray(means, dtype=float)
    p = min_prob(m, variances) if probs is None else probs
    best = np.take_along_axis(p, classify(m)[:, None], axis=1)[:, 0]
    return float(_weights(m.shape[0], weights) @ (1.0 - best))


def gamma_score(means, probs, variant: str) -> np.ndarray:
    """Classification-complexity scores (larger = harder to rank).

    ``ent``: entropy of the min-probabilities; ``bvsb``: minus the difference
    between the probabilities of the best and second-best posterior means;
    ``best``: minus the probability of the best posterior mean.
    """
    m = np.asarray(means, dtype=float)
    p = np.asarray(probs, dtype=float)
    if variant == "ent":
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        return -terms.sum(axis=-1)
    # tied means are ordered by the larger probability so labels do not matter
    order = np.lexsort((-p, m), axis=-1)
    p_best = np.take_along_axis(p, order[..., :1], axis=-1)[..., 0]
    if variant == "best":
        return -p_best
    if variant == "bvsb":
        p_sb = np.take_along_axis(p, order[..., 1:2], axis=-1)[..., 0]
        return -(p_best - p_sb)
    raise ValueError(f"unknown gamma variant {variant!r}")
