# src/energy_space.py
"""
The discrete Cameron-Martin (energy) space.

An element h = sum_c coeffs[c] * k_c is stored by its coefficients on the
Gaussian coordinates; every inner product goes through the Gram matrix.
Grid positions are 1-based (position 0 stands for the time origin, k_0 = 0);
an adapted index j means "everything observed up to grid time t_j".
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from src.errors import DimensionError, DomainError
from src.model_kernel import build_direct_sum_gram, build_gram

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GramContext:
    """
    Model, Gram matrix and reusable leading factorizations.

    The Cholesky factor of a leading block Sigma[:p, :p] is chol[:p, :p], so the
    single factorization serves every prefix solve.
    """

    model: object
    gram: object

    @classmethod
    def create(cls, model, grid, direct_sum=False):
        gram = build_direct_sum_gram(model, grid) if direct_sum else build_gram(model, grid)
        return cls(model=model, gram=gram)

    @property
    def grid(self):
        return self.gram.grid

    @property
    def sigma(self):
        return self.gram.sigma

    @property
    def chol(self):
        return self.gram.chol

    @property
    def size(self):
        return self.gram.size

    @property
    def block(self):
        return self.gram.block

    @property
    def n_coords(self):
        return self.gram.n_coords

    @cached_property
    def readout(self):
        # Row i maps the coordinates to X_{t_i}
        n, b = self.size, self.block
        out = np.zeros((n, self.n_coords))
        for k, w in enumerate(self.gram.weights):
            out[np.arange(n), np.arange(n) * b + k] = w
        out.setflags(write=False)
        return out

    @cached_property
    def coordinate_times(self):
        return np.repeat(self.grid.as_array(), self.block)

    @cached_property
    def innovation_basis(self):
        """
        Rows e_c = k_c - P_{c-1} k_c (Gram-Schmidt increments of the coordinates).

        With Sigma = L L^T the innovation I(e_c) equals L_cc * (L^{-1} Z)_c, so the
        rows are diag(L) L^{-1}; they have unit diagonal and norms L_cc.
        """
        inv = solve_triangular(self.chol, np.eye(self.n_coords), lower=True)
        out = np.diag(self.chol)[:, None] * inv
        out.setflags(write=False)
        return out

    def prefix_length(self, j):
        j = _index_value(j)
        if not 0 <= j <= self.size:
            raise DimensionError(f"Adapted index {j} outside 0..{self.size}")
        return j * self.block

    def solve_prefix(self, p, rhs):
        # Solve Sigma[:p, :p] y = rhs through the leading Cholesky block
        if p == 0:
            return np.zeros((0,) + np.shape(rhs)[1:])
        low = self.chol[:p, :p]
        y = solve_triangular(low, rhs, lower=True, check_finite=False)
        return solve_triangular(low.T, y, lower=False, check_finite=False)

    def describe(self):
        out = self.model.describe()
        out.update(grid_n=self.size, horizon=self.grid.horizon, block=self.block,
                   jitter=self.gram.jitter_applied)
        return out


@dataclass(frozen=True)
class AdaptedIndex:
    j: int

    def __post_init__(self):
        if int(self.j) < 0:
            raise DimensionError(f"Adapted index must be non-negative, got {self.j}")
        object.__setattr__(self, 'j', int(self.j))


def _index_value(j):
    return j.j if isinstance(j, AdaptedIndex) else int(j)


@dataclass(frozen=True, eq=False)
class CMElement:
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1)
        coeffs.setflags(write=False)
        object.__setattr__(self, 'coeffs', coeffs)

    def __add__(self, other):
        return CMElement(self.coeffs + other.coeffs)

    def __sub__(self, other):
        return CMElement(self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return CMElement(float(scalar) * self.coeffs)

    __rmul__ = __mul__

    def to_list(self):
        return self.coeffs.tolist()


def zero_element(ctx):
    return CMElement(np.zeros(ctx.n_coords))


def _check(ctx, h):
    if h.coeffs.shape[0] != ctx.n_coords:
        raise DimensionError(
            f"Element has {h.coeffs.shape[0]} coefficients, context has {ctx.n_coords} coordinates")


def _check_position(ctx, i, allow_zero=False):
    lo = 0 if allow_zero else 1
    if not lo <= int(i) <= ctx.size:
        raise DimensionError(f"Grid position {i} outside {lo}..{ctx.size}")
    return int(i)


def inner_product(ctx, a, b):
    _check(ctx, a)
    _check(ctx, b)
    return float(a.coeffs @ ctx.sigma @ b.coeffs)


def norm(ctx, h):
    return float(np.sqrt(max(inner_product(ctx, h, h), 0.0)))


def representer(ctx, i):
    """Evaluation representer k_{t_i}; the unit vector e_i for a single process."""
    i = _check_position(ctx, i)
    return CMElement(ctx.readout[i - 1])


def evaluate(ctx, h, i):
    # h(t_i) = <h, k_{t_i}> = (Sigma c) . readout_i
    _check(ctx, h)
    i = _check_position(ctx, i)
    return float((ctx.sigma @ h.coeffs) @ ctx.readout[i - 1])


def project_prefix(ctx, coeffs, p):
    """
    Orthogonal projection onto span{k_1..k_p} (coordinate prefix p).

    coeffs may be a single coefficient vector or a (k, n) stack of them.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    single = coeffs.ndim == 1
    stack = np.atleast_2d(coeffs)
    out = np.zeros_like(stack)
    if p > 0:
        rhs = (stack @ ctx.sigma[:, :p]).T
        out[:, :p] = ctx.solve_prefix(p, rhs).T
    return out[0] if single else out


def project_adapted(ctx, h, j):
    """
    P_j h: the energy-orthogonal projection onto the adapted subspace at t_j.

    j = 0 gives the zero element; j = N returns h.
    """
    _check(ctx, h)
    p = ctx.prefix_length(j)
    if p == ctx.n_coords:
        return CMElement(h.coeffs)
    return CMElement(project_prefix(ctx, h.coeffs, p))


def increment_element(ctx, i, j):
    """
    k_{t_j} - k_{t_i}; position i = 0 stands for the origin where k_0 = 0.
    """
    i = _check_position(ctx, i, allow_zero=True)
    j = _check_position(ctx, j)
    if i >= j:
        raise DomainError(f"increment_element needs i < j, got i={i}, j={j}")
    out = ctx.readout[j - 1].copy()
    if i > 0:
        out -= ctx.readout[i - 1]
    return CMElement(out)


def innovation_element(ctx, c):
    # e_c for the 1-based coordinate c
    if not 1 <= int(c) <= ctx.n_coords:
        raise DimensionError(f"Coordinate {c} outside 1..{ctx.n_coords}")
    return CMElement(ctx.innovation_basis[int(c) - 1])
