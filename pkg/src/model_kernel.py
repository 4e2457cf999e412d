# src/model_kernel.py
"""
Covariance models, time grids and the Gram matrix of the discrete energy space.

Everything downstream is computed from the Gram matrix Sigma_ij = R(t_i, t_j);
no Volterra kernel is ever formed.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from src.errors import DomainError, IllConditionedError

logger = logging.getLogger(__name__)

# Jitter ladder, in units of mean(diag(Sigma))
JITTER_LADDER = (1e-12, 1e-11, 1e-10, 1e-9, 1e-8)

MODEL_KINDS = ('bm', 'fbm', 'mixed')


@dataclass(frozen=True)
class HurstParameter:
    value: float

    def __post_init__(self):
        if not 0.0 < float(self.value) < 1.0:
            raise DomainError(f"Hurst parameter must lie in (0, 1), got {self.value}")
        object.__setattr__(self, 'value', float(self.value))

    @property
    def rough(self):
        return self.value < 0.5


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing observation times in (0, T]; time 0 is never a grid point."""

    times: tuple
    horizon: float
    uniform: bool = False

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        horizon = float(self.horizon)
        if not times:
            raise DomainError("A time grid needs at least one point")
        if horizon <= 0:
            raise DomainError(f"Horizon must be positive, got {horizon}")
        if times[0] <= 0:
            raise DomainError("Grid times must be strictly positive (time 0 is excluded)")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DomainError("Grid times must be strictly increasing")
        if times[-1] > horizon * (1 + 1e-12):
            raise DomainError(f"Last grid time {times[-1]} exceeds the horizon {horizon}")
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'horizon', horizon)

    @classmethod
    def regular(cls, n, horizon=1.0):
        # t_i = i * T / n, i = 1..n
        n = int(n)
        if n < 1:
            raise DomainError(f"Grid size must be at least 1, got {n}")
        step = float(horizon) / n
        times = tuple(step * i for i in range(1, n + 1))
        times = times[:-1] + (float(horizon),)
        return cls(times=times, horizon=horizon, uniform=True)

    @classmethod
    def from_times(cls, times, horizon=None):
        times = tuple(sorted(float(t) for t in times))
        return cls(times=times, horizon=times[-1] if horizon is None else horizon, uniform=False)

    @property
    def size(self):
        return len(self.times)

    @property
    def step(self):
        return self.horizon / self.size if self.uniform else None

    def as_array(self):
        return np.asarray(self.times, dtype=float)

    def nearest_position(self, t):
        # 1-based position of the grid time closest to t
        return int(np.argmin(np.abs(self.as_array() - float(t)))) + 1

    def position_of(self, t, atol=1e-12):
        # 1-based position of t if it lies on the grid, else None
        pos = self.nearest_position(t)
        return pos if abs(self.times[pos - 1] - float(t)) <= atol * max(1.0, abs(t)) else None


@dataclass(frozen=True)
class CovarianceModel:
    kind: str
    hurst: HurstParameter = None
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise DomainError(f"Unknown covariance model '{self.kind}'")
        if self.kind in ('fbm', 'mixed') and self.hurst is None:
            raise DomainError(f"Model '{self.kind}' needs a Hurst parameter")
        if self.hurst is not None and not isinstance(self.hurst, HurstParameter):
            object.__setattr__(self, 'hurst', HurstParameter(self.hurst))
        if self.kind == 'mixed':
            if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
                raise DomainError("Mixed weights need alpha, beta >= 0 and alpha + beta > 0")

    @classmethod
    def bm(cls):
        return cls('bm')

    @classmethod
    def fbm(cls, hurst):
        return cls('fbm', HurstParameter(hurst))

    @classmethod
    def mixed(cls, alpha, beta, hurst):
        return cls('mixed', HurstParameter(hurst), float(alpha), float(beta))

    @property
    def hurst_value(self):
        return 0.5 if self.kind == 'bm' else self.hurst.value

    @property
    def label(self):
        return self.kind

    def describe(self):
        out = {'model': self.kind, 'hurst': self.hurst_value}
        if self.kind == 'mixed':
            out.update(alpha=self.alpha, beta=self.beta)
        return out


def _fbm_covariance(h, t, s):
    two_h = 2.0 * h
    return 0.5 * (t ** two_h + s ** two_h - np.abs(t - s) ** two_h)


def covariance(model, t, s):
    """
    R(t, s) for the model; accepts scalars or broadcastable arrays.

    :raises DomainError: if a time is negative
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t < 0) or np.any(s < 0):
        raise DomainError("Covariance is only defined for non-negative times")

    if model.kind == 'bm':
        out = np.minimum(t, s)
    elif model.kind == 'fbm':
        out = _fbm_covariance(model.hurst.value, t, s)
    else:
        out = (model.alpha ** 2) * np.minimum(t, s) \
            + (model.beta ** 2) * _fbm_covariance(model.hurst.value, t, s)

    return float(out) if out.ndim == 0 else out


def increment_variance(model, s, t):
    # R(t,t) - 2R(t,s) + R(s,s); equals |t-s|^{2H} for fBM
    if s > t:
        raise DomainError(f"increment_variance needs s <= t, got s={s}, t={t}")
    if s < 0:
        raise DomainError("Times must be non-negative")
    return covariance(model, t, t) - 2.0 * covariance(model, t, s) + covariance(model, s, s)


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """
    Coordinate Gram matrix and its (possibly jittered) lower Cholesky factor.

    block is the number of Gaussian coordinates per grid time: 1 for a single
    process, 2 for the interleaved direct sum (B_t1, B^H_t1, B_t2, ...).
    weights map the block coordinates to the observed process X.
    """

    grid: TimeGrid
    sigma: np.ndarray
    chol: np.ndarray
    jitter_applied: float = 0.0
    block: int = 1
    weights: tuple = (1.0,)

    @property
    def n_coords(self):
        return self.sigma.shape[0]

    @property
    def size(self):
        return self.grid.size

    def reconstruction_error(self):
        # Relative Frobenius error of chol chol^T against sigma + jitter I
        target = self.sigma + self.jitter_applied * np.eye(self.n_coords)
        err = np.linalg.norm(self.chol @ self.chol.T - target)
        return float(err / max(np.linalg.norm(target), 1e-300))


def _factorize(sigma, grid, model):
    # Plain Cholesky first, then the jitter ladder
    try:
        return cholesky(sigma, lower=True, check_finite=True), 0.0
    except LinAlgError:
        pass

    scale = float(np.mean(np.diag(sigma)))
    for eps in JITTER_LADDER:
        jitter = eps * scale
        try:
            chol = cholesky(sigma + jitter * np.eye(sigma.shape[0]), lower=True)
        except LinAlgError:
            continue
        logger.warning("Gram factorization needed jitter %.1e x mean(diag) for %s on %d points",
                       eps, model.kind, grid.size)
        return chol, jitter

    raise IllConditionedError(
        f"Gram matrix of model {model.describe()} on a grid of {grid.size} points "
        f"(first={grid.times[0]:.6g}, last={grid.times[-1]:.6g}) is not factorizable "
        f"with jitter up to {JITTER_LADDER[-1]:.0e} x mean(diag)",
        grid=grid, model=model,
    )


def _lock(array):
    array.setflags(write=False)
    return array


def build_gram(model, grid):
    """
    Sigma_ij = R(t_i, t_j) with its Cholesky factor.

    :raises IllConditionedError: when the jitter ladder is exhausted
    """
    times = grid.as_array()
    sigma = covariance(model, times[:, None], times[None, :])
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    chol, jitter = _factorize(sigma, grid, model)
    return GramMatrix(grid=grid, sigma=_lock(sigma), chol=_lock(chol), jitter_applied=jitter)


def build_direct_sum_gram(model, grid):
    """
    Block-diagonal Gram of the independent pair (B, B^H), interleaved per grid time.

    The observed mixed process is X = alpha * B + beta * B^H, so the read-out
    weights are (alpha, beta).
    """
    if model.kind != 'mixed':
        raise DomainError("The direct-sum Gram is only defined for the mixed model")

    times = grid.as_array()
    sigma_b = covariance(CovarianceModel.bm(), times[:, None], times[None, :])
    sigma_h = covariance(CovarianceModel.fbm(model.hurst.value), times[:, None], times[None, :])
    n = grid.size
    sigma = np.zeros((2 * n, 2 * n))
    sigma[0::2, 0::2] = np.atleast_2d(sigma_b)
    sigma[1::2, 1::2] = np.atleast_2d(sigma_h)
    chol, jitter = _factorize(sigma, grid, model)
    return GramMatrix(grid=grid, sigma=_lock(sigma), chol=_lock(chol), jitter_applied=jitter,
                      block=2, weights=(model.alpha, model.beta))
