"""Kriging (Gaussian-process regression) for a single response surface.

Every surface carries its own Matern-5/2 kernel, a constant trend and a
diagonal noise matrix built from per-observation variances.  Models are
immutable: :meth:`KrigingModel.update` returns a new model whose Cholesky
factor is the old one grown by one row.

The kernel uses a weighted distance ``||h||_theta = sqrt(sum_i theta_i h_i^2)``,
so ``theta`` acts as an inverse squared length-scale.  Use
:meth:`KernelSpec.from_lengthscales` for the conventional parameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.stats import qmc

SQRT5 = math.sqrt(5.0)
QUAD_COEF = SQRT5 + 5.0 / 3.0
KERNEL_FORMS = ("printed", "standard")

JITTER_START = 1e-10
JITTER_MAX = 1e-4
PIVOT_FLOOR = 1e-14  # smallest accepted squared Cholesky pivot, relative to s^2


class NumericalError(ArithmeticError):
    """A covariance matrix could not be factorized or an optimizer failed."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Matern-5/2 hyperparameters for one surface.

    Parameters
    ----------
    scale : float
        Signal variance ``s^2``.
    theta : array_like
        Per-dimension weights of the distance norm (one per input dimension).
    trend : float
        Constant prior mean.
    form : {"printed", "standard"}
        ``"printed"`` is ``s^2 (1 + (sqrt5 + 5/3) r^2) exp(-sqrt5 r)``;
        ``"standard"`` is the usual Matern-5/2 polynomial
        ``s^2 (1 + sqrt5 r + 5 r^2 / 3) exp(-sqrt5 r)``.  The printed form has
        a cusp at ``r = 0`` (its sample paths are rough, like an exponential
        kernel) and is not positive definite in every dimension.
    """

    scale: float
    theta: tuple[float, ...]
    trend: float = 0.0
    form: str = "printed"

    def __post_init__(self):
        theta = tuple(float(t) for t in np.atleast_1d(np.asarray(self.theta, dtype=float)))
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "trend", float(self.trend))
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"kernel scale must be positive, got {self.scale}")
        if len(theta) == 0 or any(not (t > 0 and math.isfinite(t)) for t in theta):
            raise ValueError(f"kernel theta must be positive, got {theta}")
        if not math.isfinite(self.trend):
            raise ValueError("kernel trend must be finite")
        if self.form not in KERNEL_FORMS:
            raise ValueError(f"kernel form must be one of {KERNEL_FORMS}, got {self.form!r}")

    @classmethod
    def from_lengthscales(cls, scale: float, lengthscales, trend: float = 0.0, form: str = "printed") -> "KernelSpec":
        """Build from conventional length-scales ``L`` via ``theta = 1 / L^2``."""
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")
        return cls(scale, tuple(1.0 / ls**2), trend, form)

    @property
    def input_dim(self) -> int:
        return len(self.theta)

    @property
    def lengthscales(self) -> np.ndarray:
        return 1.0 / np.sqrt(np.asarray(self.theta))

    def __call__(self, X1, X2) -> np.ndarray:
        return kernel_matrix(self, X1, X2)


def as_points(x, dim: int) -> np.ndarray:
    """Coerce ``x`` to an ``(m, dim)`` float array, raising on dimension mismatch."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1) if dim == 1 else a.reshape(1, -1)
    if a.ndim != 2 or a.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got array of shape {np.shape(x)}")
    return a


def _weighted_distance(X1: np.ndarray, X2: np.ndarray, theta) -> np.ndarray:
    w = np.sqrt(np.asarray(theta))
    A = X1 * w
    B = X2 * w
    if A.shape[1] == 1:
        return np.abs(A - B.T)
    # direct differences: the expanded-square form loses ~1e-8 near r = 0
    return cdist(A, B)


def matern52(r, scale: float = 1.0, form: str = "printed"):
    """Matern-5/2 covariance at weighted distance ``r`` (see :class:`KernelSpec` for ``form``)."""
    r = np.asarray(r, dtype=float)
    if form == "standard":
        return scale * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)
    return scale * (1.0 + QUAD_COEF * r * r) * np.exp(-SQRT5 * r)


def kernel_matrix(spec: KernelSpec, X1, X2) -> np.ndarray:
    d = spec.input_dim
    return matern52(_weighted_distance(as_points(X1, d), as_points(X2, d), spec.theta), spec.scale, spec.form)


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    """Covariance between two single points."""
    d = spec.input_dim
    a = np.atleast_1d(np.asarray(x, dtype=float))
    b = np.atleast_1d(np.asarray(x2, dtype=float))
    if a.shape != (d,) or b.shape != (d,):
        raise ValueError(f"points must have dimension {d}")
    h = a - b
    r = math.sqrt(float(np.dot(np.asarray(spec.theta), h * h)))
    return float(matern52(r, spec.scale, spec.form))


@dataclass(frozen=True)
class ObservationSet:
    """Design locations, (batch-averaged) responses and their noise variances."""

    locations: np.ndarray
    values: np.ndarray
    noise_variances: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.locations, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(self.values, dtype=float).reshape(-1)
        nv = np.asarray(self.noise_variances, dtype=float).reshape(-1)
        if not (X.shape[0] == y.shape[0] == nv.shape[0]):
            raise ValueError("locations, values and noise_variances must have equal length")
        if np.any(nv < 0) or not np.all(np.isfinite(nv)):
            raise ValueError("noise variances must be finite and nonnegative")
        for a in (X, y, nv):
            a.setflags(write=False)
        object.__setattr__(self, "locations", X)
        object.__setattr__(self, "values", y)
        object.__setattr__(self, "noise_variances", nv)

    @classmethod
    def empty(cls, dim: int) -> "ObservationSet":
        return cls(np.empty((0, dim)), np.empty(0), np.empty(0))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    def append(self, x, y: float, noise_var: float) -> "ObservationSet":
        x = as_points(x, self.dim)
        return ObservationSet(
            np.vstack([self.locations, x]),
            np.append(self.values, float(y)),
            np.append(self.noise_variances, float(noise_var)),
        )


class Posterior(NamedTuple):
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None


def _factorize(C: np.ndarray, scale: float, unjittered: bool = True) -> tuple[np.ndarray, float]:
    """Cholesky of ``C``, retrying with diagonal jitter ``1e-10 s^2 ... 1e-4 s^2`` on failure.

    With ``unjittered`` the first attempt adds no jitter at all.
    """
    n = C.shape[0]
    tried = []
    levels = [0.0] if unjittered else []
    level = JITTER_START
    while level <= JITTER_MAX * (1 + 1e-9):
        levels.append(level)
        level *= 10.0
    for level in levels:
        jitter = level * scale
        tried.append(jitter)
        try:
            L = cholesky(C + jitter * np.eye(n), lower=True, check_finite=False)
        except LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.min(np.diag(L)) ** 2 > PIVOT_FLOOR * scale:
            return L, jitter
    raise NumericalError(
        "covariance matrix is not positive definite; attempted jitter levels "
        + ", ".join(f"{j:.1e}" for j in tried)
    )


class KrigingModel:
    """Posterior state of one surface.

    Attributes
    ----------
    kernel : KernelSpec
    observations : ObservationSet
    chol : ndarray
        Lower Cholesky factor of ``K + Sigma + jitter * I``.
    white : ndarray
        ``chol^{-1} (y - trend)``.
    jitter : float
        Diagonal jitter actually used in the factorization.
    """

    __slots__ = ("kernel", "observations", "chol", "white", "jitter")

    def __init__(self, kernel: KernelSpec, observations: ObservationSet | None = None):
        if observations is None:
            observations = ObservationSet.empty(kernel.input_dim)
        if observations.dim != kernel.input_dim:
            raise ValueError("observation dimension does not match the kernel")
        n = len(observations)
        if n == 0:
            chol, white, jitter = np.empty((0, 0)), np.empty(0), 0.0
        else:
            X = observations.locations
            C = kernel_matrix(kernel, X, X) + np.diag(observations.noise_variances)
            chol, jitter = _factorize(C, kernel.scale)
            white = solve_triangular(chol, observations.values - kernel.trend, lower=True)
        self._set(kernel, observations, chol, white, jitter)

    def _set(self, kernel, observations, chol, white, jitter):
        chol.setflags(write=False)
        white.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "observations", observations)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "white", white)
        object.__setattr__(self, "jitter", jitter)

    def __setattr__(self, name, value):
        raise AttributeError("KrigingModel is immutable")

    @classmethod
    def _from_parts(cls, kernel, observations, chol, white, jitter) -> "KrigingModel":
        obj = object.__new__(cls)
        obj._set(kernel, observations, chol, white, jitter)
        return obj

    def __len__(self) -> int:
        return len(self.observations)

    def __repr__(self) -> str:
        return f"KrigingModel(n={len(self)}, kernel={self.kernel})"

    def _solve_k(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Kxq = kernel_matrix(self.kernel, self.observations.locations, Q)
        return Kxq, solve_triangular(self.chol, Kxq, lower=True, check_finite=False)

    def posterior(self, query, full_cov: bool = False) -> Posterior:
        """Kriging mean and variance at ``query`` (and covariance if ``full_cov``)."""
        k = self.kernel
        Q = as_points(query, k.input_dim)
        if len(self) == 0:
            mean = np.full(Q.shape[0], k.trend)
            var = np.full(Q.shape[0], k.scale)
            cov = kernel_matrix(k, Q, Q) if full_cov else None
            return Posterior(mean, var, cov)
        _, V = self._solve_k(Q)
        mean = k.trend + V.T @ self.white
        var = np.maximum(k.scale - np.einsum("ij,ij->j", V, V), 0.0)
        cov = None
        if full_cov:
            cov = kernel_matrix(k, Q, Q) - V.T @ V
            np.fill_diagonal(cov, var)
        return Posterior(mean, var, cov)

    def update(self, x_new, y_new: float, noise_var: float) -> "KrigingModel":
        """Condition on one more observation by appending a row to the factor."""
        if not noise_var >= 0:
            raise ValueError("noise variance must be nonnegative")
        k = self.kernel
        x = as_points(x_new, k.input_dim)
        obs = self.observations.append(x, y_new, noise_var)
        n = len(self)
        if n == 0:
            return KrigingModel(k, obs)
        kx, l = self._solve_k(x)
        l = l[:, 0]
        pivot = k.scale + noise_var + self.jitter - float(l @ l)
        if not pivot > PIVOT_FLOOR * k.scale:
            # too close to singular for an append; refactor with the jitter ladder
            return KrigingModel(k, obs)
        d = math.sqrt(pivot)
        chol = np.zeros((n + 1, n + 1))
        chol[:n, :n] = self.chol
        chol[n, :n] = l
        chol[n, n] = d
        w = (float(y_new) - k.trend - float(l @ self.white)) / d
        return KrigingModel._from_parts(k, obs, chol, np.append(self.white, w), self.jitter)

    def cross_covariance(self, A, B) -> np.ndarray:
        """Posterior covariance ``v(a_i, b_j)``."""
        k = self.kernel
        A = as_points(A, k.input_dim)
        B = as_points(B, k.input_dim)
        prior = kernel_matrix(k, A, B)
        if len(self) == 0:
            return prior
        _, Va = self._solve_k(A)
        _, Vb = self._solve_k(B)
        return prior - Va.T @ Vb

    def variance_after(self, x_cand, noise_var: float, query) -> np.ndarray:
        """Posterior variance at ``query`` once ``x_cand`` is observed with ``noise_var``.

        Independent of the value that would be observed.
        """
        k = self.kernel
        xc = as_points(x_cand, k.input_dim)
        Q = as_points(query, k.input_dim)
        var_q = self.posterior(Q).variance
        v = self.cross_covariance(Q, xc)[:, 0]
        var_c = self.posterior(xc).variance[0]
        denom = noise_var + var_c
        if denom <= 0:
            return var_q
        return np.maximum(var_q - v * v / denom, 0.0)


def posterior(model: KrigingModel, query_points, full_cov: bool = True) -> Posterior:
    return model.posterior(query_points, full_cov=full_cov)


def update_with_observation(model: KrigingModel, x_new, y_new: float, noise_var: float) -> KrigingModel:
    return model.update(x_new, y_new, noise_var)


def variance_after_hypothetical(model: KrigingModel, x_cand, noise_var: float, query) -> float:
    out = model.variance_after(x_cand, noise_var, query)
    return float(out[0]) if out.shape == (1,) else out


def variance_after_self(variance, noise_var):
    """Variance at a site after observing that same site: ``d^2 s^2 / (s^2 + d^2)``."""
    variance = np.asarray(variance, dtype=float)
    noise_var = np.asarray(noise_var, dtype=float)
    # written as d^2 / (1 + d^2 / s^2) so infinite noise leaves the variance unchanged
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(noise_var > 0, variance / (1.0 + variance / np.where(noise_var > 0, noise_var, 1.0)), 0.0)
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# Hyperparameter estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelBounds:
    """Box constraints for the maximum-likelihood search.

    ``theta`` bounds are given per dimension as ``(low, high)`` pairs on the
    weight scale; see :meth:`from_lengthscales` for length-scale bounds.
    """

    scale: tuple[float, float]
    theta: tuple[tuple[float, float], ...]
    nugget: tuple[float, float] = (1e-8, 1.0)

    @classmethod
    def from_lengthscales(cls, scale, lengthscales, nugget=(1e-8, 1.0)) -> "KernelBounds":
        theta = tuple((1.0 / hi**2, 1.0 / lo**2) for lo, hi in lengthscales)
        return cls(tuple(scale), theta, tuple(nugget))

    def log_box(self, fit_nugget: bool) -> np.ndarray:
        rows = [self.scale, *self.theta]
        if fit_nugget:
            rows.append(self.nugget)
        box = np.log(np.asarray(rows, dtype=float))
        if np.any(box[:, 0] > box[:, 1]):
            raise ValueError("lower bounds must not exceed upper bounds")
        return box


@dataclass(frozen=True)
class FitResult:
    kernel: KernelSpec
    nugget: float
    log_likelihood: float
    observations: ObservationSet = field(repr=False)


def min_fit_size(dim: int) -> int:
    return 2 * (dim + 2)


def _neg_log_likelihood(params, X, y, noise, fit_nugget, trend, D2=None, form="printed"):
    d = X.shape[1]
    scale = math.exp(params[0])
    theta = np.exp(params[1 : 1 + d])
    nug = math.exp(params[1 + d]) if fit_nugget else 0.0
    if D2 is None:
        r = _weighted_distance(X, X, theta)
    else:
        r = np.sqrt(np.tensordot(D2, theta, axes=([0], [0])))
    C = matern52(r, scale, form)
    C[np.diag_indices_from(C)] += noise + nug
    try:
        # the likelihood always carries the smallest jitter so it stays smooth in theta
        L, _ = _factorize(C, scale, unjittered=False)
    except NumericalError:
        return np.inf, None
    ones = solve_triangular(L, np.ones(len(y)), lower=True, check_finite=False)
    wy = solve_triangular(L, y, lower=True, check_finite=False)
    if trend is None:
        t = float(ones @ wy) / float(ones @ ones)
    else:
        t = trend
    res = wy - t * ones
    nll = 0.5 * float(res @ res) + float(np.log(np.diag(L)).sum()) + 0.5 * len(y) * math.log(2 * math.pi)
    return nll, t


def fit_hyperparameters(
    observations: ObservationSet,
    bounds: KernelBounds,
    restarts: int = 5,
    fit_nugget: bool = False,
    trend: float | None = None,
    seed: int = 0,
    maxiter: int | None = None,
    form: str = "printed",
) -> FitResult:
    """Maximum-likelihood Matern-5/2 hyperparameters for one surface.

    Multi-start Nelder-Mead in log-parameters, with start points drawn by
    Latin hypercube over the log box from ``seed``.  With ``trend=None`` the
    trend is the generalized-least-squares intercept, profiled out of the
    likelihood.  With ``fit_nugget`` a constant variance is added to every
    observation's noise and estimated jointly.
    """
    X, y, noise = observations.locations, observations.values, observations.noise_variances
    n, d = X.shape
    if n < min_fit_size(d):
        raise InsufficientDataError(
            f"need at least {min_fit_size(d)} observations to fit a {d}-d kernel, got {n}"
        )
    if len(bounds.theta) != d:
        raise ValueError("bounds.theta must have one entry per input dimension")
    if restarts < 1:
        raise ValueError("restarts must be positive")
    box = bounds.log_box(fit_nugget)
    diff = X[:, None, :] - X[None, :, :]
    D2 = np.moveaxis(diff * diff, -1, 0)

    def objective(p):
        return _neg_log_likelihood(p, X, y, noise, fit_nugget, trend, D2, form)[0]

    starts = qmc.LatinHypercube(d=box.shape[0], seed=seed).random(restarts)
    starts = box[:, 0] + starts * (box[:, 1] - box[:, 0])
    best = None
    for x0 in starts:
        try:
            res = minimize(
                objective,
                x0,
                method="Nelder-Mead",
                bounds=[tuple(b) for b in box],
                options={"maxiter": maxiter or 400 * box.shape[0], "xatol": 1e-4, "fatol": 1e-8},
            )
        except (ValueError, FloatingPointError):
            continue
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise NumericalError("all hyperparameter optimizer starts failed")
    p = np.clip(best.x, box[:, 0], box[:, 1])
    nll, t = _neg_log_likelihood(p, X, y, noise, fit_nugget, trend, D2, form)
    nug = math.exp(p[1 + d]) if fit_nugget else 0.0
    kernel = KernelSpec(math.exp(p[0]), tuple(np.exp(p[1 : 1 + d])), t, form)
    obs = replace(observations, noise_variances=noise + nug) if fit_nugget else observations
    return FitResult(kernel, nug, -nll, obs)


def default_bounds(
    observations: ObservationSet,
    box_widths: Sequence[float],
    lengthscale_range=(0.05, 5.0),
    scale_range=(1e-3, 1e2),
    nugget=(1e-8, 1.0),
) -> KernelBounds:
    """Bounds relative to the data: length-scales as multiples of the box width,
    signal variance as multiples of the sample variance of the responses."""
    var = float(np.var(observations.values)) if len(observations) > 1 else 1.0
    var = var if var > 0 else 1.0
    lo, hi = lengthscale_range
    ls = [(lo * w, hi * w) for w in box_widths]
    nv = (nugget[0] * var, nugget[1] * var)
    return KernelBounds.from_lengthscales((scale_range[0] * var, scale_range[1] * var), ls, nv)
