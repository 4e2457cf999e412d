# src/malliavin_ops.py
"""
Cylindrical and integral functionals, the derivative D, the finite-dimensional
Skorokhod divergence and the predictable projection.

Functionals see the observed process X through the context read-out, so the
same code serves a single Gaussian process and the direct sum (B, B^H) where
D_X F = (alpha * D_B F, beta * D_{B^H} F) by the chain rule.
"""

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from src.energy_space import CMElement, project_prefix
from src.errors import ContractError, DimensionError, DomainError
from src.gaussian_engine import (
    DEFAULT_NODES, conditional_expectation_prefix, conditional_law_prefix, gauss_hermite_rule,
)

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
GRADIENT_TOLERANCE = 1e-4
PATH_CHUNK = 2048


@dataclass(frozen=True, eq=False)
class CylindricalFunctional:
    """
    F = f(X_{t_i1}, ..., X_{t_in}) with 1-based grid positions `indices`.

    value and gradient are vectorized: (K, n) -> (K,) and (K, n) -> (K, n).
    An additive functional, f(x) = constant + sum_i phi_i(x_i), also carries
    `terms` (the phi_i columnwise) and `curvature` (the phi_i'' columnwise);
    its gradient is then the columnwise phi_i'.
    """

    name: str
    indices: tuple
    value: Callable
    gradient: Callable = None
    terms: Callable = None
    curvature: Callable = None
    constant: float = 0.0
    finite_difference: bool = False

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise DomainError(f"Functional '{self.name}' needs strictly increasing positions")
        object.__setattr__(self, 'indices', indices)

    @property
    def n(self):
        return len(self.indices)

    @property
    def additive(self):
        return self.terms is not None

    def loadings(self, ctx):
        # (n, n_coords) read-out of X at the functional's positions
        if self.n and self.indices[-1] > ctx.size:
            raise DimensionError(f"Functional '{self.name}' uses position {self.indices[-1]} "
                                 f"beyond grid size {ctx.size}")
        idx = np.asarray(self.indices, dtype=int) - 1
        return ctx.readout[idx] if self.n else np.zeros((0, ctx.n_coords))

    def observe(self, ctx, paths):
        return np.atleast_2d(paths) @ self.loadings(ctx).T

    def evaluate(self, ctx, paths):
        return self.value(self.observe(ctx, paths))


def constant_functional(value=1.0):
    return CylindricalFunctional(
        name='constant', indices=(),
        value=lambda x: np.full(x.shape[0], float(value)),
        gradient=lambda x: np.zeros_like(x),
        terms=lambda x: np.zeros_like(x),
        curvature=lambda x: np.zeros_like(x),
        constant=float(value),
    )


def additive_functional(name, indices, phi, dphi, d2phi, constant=0.0):
    """Build f(x) = constant + sum_i phi_i(x_i) from columnwise maps phi, phi', phi''."""
    return CylindricalFunctional(
        name=name, indices=tuple(indices),
        value=lambda x: constant + phi(x).sum(axis=1),
        gradient=dphi, terms=phi, curvature=d2phi, constant=float(constant),
    )


def finite_difference_gradient(value, step=FD_STEP):
    # Central differences, column by column
    def gradient(x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for i in range(x.shape[1]):
            up, down = x.copy(), x.copy()
            up[:, i] += step
            down[:, i] -= step
            out[:, i] = (value(up) - value(down)) / (2.0 * step)
        return out
    return gradient


def with_finite_difference(functional):
    """Fill a missing gradient by central differences and flag it."""
    if functional.gradient is not None:
        return functional
    logger.warning("Functional '%s' has no analytic gradient; using finite differences",
                   functional.name)
    return CylindricalFunctional(
        name=functional.name, indices=functional.indices, value=functional.value,
        gradient=finite_difference_gradient(functional.value), finite_difference=True,
    )


def linear_combination(functionals, weights, name='combination'):
    """sum_k w_k F_k on the union of positions."""
    union = tuple(sorted({i for f in functionals for i in f.indices}))
    where = {i: k for k, i in enumerate(union)}
    columns = [np.array([where[i] for i in f.indices], dtype=int) for f in functionals]
    weights = [float(w) for w in weights]

    def value(x):
        out = np.zeros(x.shape[0])
        for f, cols, w in zip(functionals, columns, weights):
            out += w * f.value(x[:, cols])
        return out

    def scatter(attr):
        def apply(x):
            out = np.zeros_like(x)
            for f, cols, w in zip(functionals, columns, weights):
                if cols.size:
                    out[:, cols] += w * getattr(f, attr)(x[:, cols])
            return out
        return apply

    additive = all(f.additive for f in functionals)
    return CylindricalFunctional(
        name=name, indices=union, value=value,
        gradient=scatter('gradient') if all(f.gradient for f in functionals) else None,
        terms=scatter('terms') if additive else None,
        curvature=scatter('curvature') if additive else None,
        constant=sum(w * f.constant for f, w in zip(functionals, weights)),
    )


@dataclass(frozen=True)
class IntegralFunctional:
    """F = int_0^T g(s, X_s) ds, with x-derivatives of the integrand."""

    name: str
    integrand: Callable
    dx: Callable
    dxx: Callable = None


def trapezoid_weights(grid):
    # Nodes 0 = t_0 < t_1 < ... < t_N = T; the origin carries X_0 = 0
    t = np.concatenate([[0.0], grid.as_array()])
    dt = np.diff(t)
    w = np.zeros_like(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def discretize_integral_functional(functional, grid):
    """
    Trapezoid discretization f(x) = w_0 g(0, 0) + sum_k w_k g(t_k, x_k) on the full
    grid; gradient w_k * dg/dx(t_k, x_k).
    """
    if abs(grid.times[-1] - grid.horizon) > 1e-12 * grid.horizon:
        raise DomainError("Integral functionals need a grid that ends at the horizon")
    w = trapezoid_weights(grid)
    origin = w[0] * float(np.asarray(functional.integrand(np.zeros(1), np.zeros(1))).reshape(-1)[0])
    times = grid.as_array()[None, :]
    weights = w[None, 1:]
    g, dg, ddg = functional.integrand, functional.dx, functional.dxx

    def phi(x):
        return weights * g(times, x)

    def dphi(x):
        return weights * dg(times, x)

    d2phi = (lambda x: weights * ddg(times, x)) if ddg is not None else None
    return CylindricalFunctional(
        name=functional.name, indices=tuple(range(1, grid.size + 1)),
        value=lambda x: origin + phi(x).sum(axis=1),
        gradient=dphi, terms=phi, curvature=d2phi, constant=origin,
    )


class GradientCheck(NamedTuple):
    max_deviation: float
    passed: bool
    points: int


def gradient_check(functional, points=100, step=FD_STEP, tolerance=GRADIENT_TOLERANCE, seed=0):
    """
    Compare the analytic gradient with central differences on random points of
    [-3, 3]^n. A deviation above tolerance is reported, not raised.
    """
    if functional.n == 0:
        return GradientCheck(0.0, True, 0)
    x = np.random.default_rng(seed).uniform(-3.0, 3.0, size=(points, functional.n))
    analytic = functional.gradient(x)
    numeric = finite_difference_gradient(functional.value, step)(x)
    scale = np.maximum(np.linalg.norm(numeric, axis=1), 1e-8)
    deviation = float(np.max(np.linalg.norm(analytic - numeric, axis=1) / scale))
    return GradientCheck(deviation, deviation <= tolerance, points)


def derivative(ctx, functional, observed):
    """
    D F at one path as an energy-space element: coefficients grad f(x) at the
    functional's positions (through the read-out), zero elsewhere.
    """
    observed = np.asarray(observed, dtype=float).reshape(1, -1)
    if observed.shape[1] != functional.n:
        raise DimensionError(f"Expected {functional.n} values, got {observed.shape[1]}")
    if functional.n == 0:
        return CMElement(np.zeros(ctx.n_coords))
    grad = functional.gradient(observed)[0]
    return CMElement(functional.loadings(ctx).T @ grad)


def derivative_coefficients(ctx, functional, paths):
    # Row k holds the coefficients of D F on path k
    paths = np.atleast_2d(paths)
    if functional.n == 0:
        return np.zeros_like(paths)
    loads = functional.loadings(ctx)
    return functional.gradient(paths @ loads.T) @ loads


class DivergenceInput:
    """
    A field u = sum_j a_j d_j: direction rows d_j and coefficient rules evaluated
    on coordinate paths. gradient_rule returns the partials of every a_j, either
    per path (K, S, n) or, for affine rules, a constant (S, n).
    """

    def __init__(self, directions, coefficient_rule, gradient_rule=None, deterministic=False,
                 name='field', finite_difference=False):
        self.directions = np.atleast_2d(np.asarray(directions, dtype=float))
        self.coefficient_rule = coefficient_rule
        self.gradient_rule = gradient_rule
        self.deterministic = deterministic
        self.name = name
        self.finite_difference = finite_difference

    @property
    def slots(self):
        return self.directions.shape[0]

    def evaluate(self, paths):
        coeffs = np.atleast_2d(self.coefficient_rule(paths))
        if self.deterministic:
            return coeffs, None
        if self.gradient_rule is None:
            raise ContractError(f"Field '{self.name}' has random coefficients but no gradient rule")
        return coeffs, self.gradient_rule(paths)

    def coefficients(self, paths):
        return self.evaluate(paths)[0]


class AffineField(DivergenceInput):
    """Coefficients a_j(z) = offset_j + slope_j . z (so D a_j has coefficients slope_j)."""

    def __init__(self, offset, slope, directions, name='affine'):
        offset = np.asarray(offset, dtype=float).reshape(-1)
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        slope = np.asarray(slope, dtype=float).reshape(directions.shape[0], -1)
        super().__init__(
            directions,
            coefficient_rule=lambda z: offset[None, :] + np.atleast_2d(z) @ slope.T,
            gradient_rule=lambda z: slope,
            deterministic=not np.any(slope),
            name=name,
        )
        self.offset = offset
        self.slope = slope

    def expected_norm_sq(self, ctx):
        # E||u||^2 = sum_jl (p_j p_l + (Q Sigma Q^T)_jl) (D Sigma D^T)_jl
        second = np.outer(self.offset, self.offset) + self.slope @ ctx.sigma @ self.slope.T
        return float(np.sum(second * (self.directions @ ctx.sigma @ self.directions.T)))

    def defect(self, ctx):
        # E <Du, (Du)^*> = tr(C^2), C = Q Sigma D^T
        c = self.slope @ ctx.sigma @ self.directions.T
        return float(np.trace(c @ c))


def divergence(ctx, u, paths, chunk=PATH_CHUNK):
    """
    delta(u) = sum_j a_j I(d_j) - sum_j <D a_j, d_j>, per path.

    The correction term is always evaluated from the gradient rules.
    """
    paths = np.asarray(paths, dtype=float)
    single = paths.ndim == 1
    paths = np.atleast_2d(paths)
    if paths.shape[1] != ctx.n_coords or u.directions.shape[1] != ctx.n_coords:
        raise DimensionError("Field, path and context dimensions disagree")

    sigma_d = u.directions @ ctx.sigma
    out = np.empty(paths.shape[0])
    for start in range(0, paths.shape[0], chunk):
        z = paths[start:start + chunk]
        coeffs, grads = u.evaluate(z)
        value = np.einsum('ks,ks->k', coeffs, z @ u.directions.T)
        if grads is not None:
            grads = np.asarray(grads)
            if grads.ndim == 2:
                value = value - np.sum(grads * sigma_d)
            else:
                value = value - np.einsum('ksn,sn->k', grads, sigma_d)
        out[start:start + chunk] = value
    return float(out[0]) if single else out


def field_norm_sq(ctx, u, paths, chunk=PATH_CHUNK):
    # ||u||^2 = a G a^T per path, G = D Sigma D^T
    gram = u.directions @ ctx.sigma @ u.directions.T
    paths = np.atleast_2d(paths)
    out = np.empty(paths.shape[0])
    for start in range(0, paths.shape[0], chunk):
        a = u.coefficients(paths[start:start + chunk])
        out[start:start + chunk] = np.einsum('ks,st,kt->k', a, gram, a)
    return out


def pairing_with_field(ctx, coefficients, u, paths, chunk=PATH_CHUNK):
    # <h_k, u_k> per path for coefficient rows h_k
    coefficients = np.atleast_2d(coefficients)
    paths = np.atleast_2d(paths)
    out = np.empty(paths.shape[0])
    for start in range(0, paths.shape[0], chunk):
        a = u.coefficients(paths[start:start + chunk])
        h = coefficients[start:start + chunk]
        out[start:start + chunk] = np.einsum('ks,ks->k', a, (h @ ctx.sigma) @ u.directions.T)
    return out


class ConditioningPlan:
    """Conditional laws for every coordinate prefix, built on first use."""

    def __init__(self, ctx):
        self.ctx = ctx
        self._laws = {}

    def law(self, p):
        if p not in self._laws:
            self._laws[p] = conditional_law_prefix(self.ctx, p)
        return self._laws[p]


def conditional_gradient(ctx, functional, p, paths, nodes=DEFAULT_NODES,
                         sensitivity=False, plan=None):
    """
    E[grad f(X_F) | first p coordinates] for every row of paths.

    Additive functionals use one-dimensional Gauss-Hermite rules per term;
    other functionals go through conditional_expectation (<= 4 future
    coordinates). With sensitivity=True also returns the partials with respect
    to the observed coordinates, shape (K, n, p); analytic for additive
    functionals with a curvature map, central differences otherwise.
    """
    paths = np.atleast_2d(paths)
    k, n = paths.shape[0], functional.n
    if n == 0:
        empty = np.zeros((k, 0))
        return (empty, np.zeros((k, 0, p))) if sensitivity else empty

    loads = functional.loadings(ctx)
    observed = paths[:, :p]
    if p == ctx.n_coords:
        grad = functional.gradient(observed @ loads.T)
        if not sensitivity:
            return grad
        if functional.curvature is None:
            return grad, _fd_sensitivity(ctx, functional, p, paths, nodes, plan)
        return grad, functional.curvature(observed @ loads.T)[:, :, None] * loads[None, :, :p]

    law = (plan or ConditioningPlan(ctx)).law(p)
    effective = loads[:, :p] + loads[:, p:] @ law.mean_map
    mean = observed @ effective.T

    if functional.additive and functional.gradient is not None:
        future = loads[:, p:]
        sd = np.sqrt(np.maximum(np.einsum('ij,jk,ik->i', future, law.covariance, future), 0.0))
        x, w = gauss_hermite_rule(nodes)
        points = mean[:, None, :] + sd[None, None, :] * x[None, :, None]
        flat = points.reshape(-1, n)
        grad = (functional.gradient(flat).reshape(k, len(w), n) * w[None, :, None]).sum(axis=1)
        if not sensitivity:
            return grad
        if functional.curvature is None:
            return grad, _fd_sensitivity(ctx, functional, p, paths, nodes, plan)
        curv = (functional.curvature(flat).reshape(k, len(w), n) * w[None, :, None]).sum(axis=1)
        return grad, curv[:, :, None] * effective[None, :, :]

    grad = np.column_stack([
        conditional_expectation_prefix(ctx, lambda y, i=i: functional.gradient(y)[:, i], loads,
                                       p, observed, nodes=nodes).mean
        for i in range(n)
    ])
    if not sensitivity:
        return grad
    return grad, _fd_sensitivity(ctx, functional, p, paths, nodes, plan)


def _fd_sensitivity(ctx, functional, p, paths, nodes, plan, step=FD_STEP):
    # Central differences of the conditional gradient in each observed coordinate
    out = np.empty((paths.shape[0], functional.n, p))
    for col in range(p):
        up, down = paths.copy(), paths.copy()
        up[:, col] += step
        down[:, col] -= step
        out[:, :, col] = (conditional_gradient(ctx, functional, p, up, nodes, plan=plan)
                          - conditional_gradient(ctx, functional, p, down, nodes, plan=plan)) / (2 * step)
    return out


def predictable_projection(ctx, functional, j, prefix, nodes=DEFAULT_NODES):
    """
    (Pi D F)_j = sum_i E[d_i f | prefix] * P_j k_{t_i}: conditional expectation of
    the derivative, then projection onto the adapted subspace at t_j.
    """
    p = ctx.prefix_length(j)
    prefix = np.asarray(prefix, dtype=float).reshape(-1)
    if prefix.shape[0] != p:
        raise DimensionError(f"Expected {p} observed coordinates, got {prefix.shape[0]}")
    if functional.n == 0 or p == 0:
        return CMElement(np.zeros(ctx.n_coords))
    padded = np.zeros((1, ctx.n_coords))
    padded[0, :p] = prefix
    grad = conditional_gradient(ctx, functional, p, padded, nodes)[0]
    projected = project_prefix(ctx, functional.loadings(ctx), p)
    return CMElement(grad @ projected)


def projected_derivative_rows(ctx, functional, p, paths, nodes=DEFAULT_NODES, plan=None):
    """Coefficient rows of (Pi D F) at coordinate prefix p, one per path."""
    if functional.n == 0 or p == 0:
        return np.zeros((np.atleast_2d(paths).shape[0], ctx.n_coords))
    grad = conditional_gradient(ctx, functional, p, paths, nodes, plan=plan)
    return grad @ project_prefix(ctx, functional.loadings(ctx), p)


class AdaptedVectorField(DivergenceInput):
    """
    Discrete Clark integrand of a functional.

    Slot c observes the coordinates before c and carries
    a_c = E[<DF, d_c> | prefix] / ||d_c||^2 along d_c. With innovation
    directions d_c = k_c - P_{c-1} k_c the slot holds (P_c - P_{c-1}) E[DF | prefix],
    the increment of the predictable projection; at Brownian covariance these
    are the plain increments k_{t_c} - k_{t_{c-1}}.
    """

    def __init__(self, ctx, functional, directions='innovation', nodes=DEFAULT_NODES):
        if directions == 'innovation':
            rows = np.array(ctx.innovation_basis)
            prefixes = np.arange(ctx.n_coords)
        elif directions == 'increment':
            if ctx.block != 1:
                raise DomainError("Increment directions are defined for a single process only")
            rows = ctx.readout - np.vstack([np.zeros((1, ctx.n_coords)), ctx.readout[:-1]])
            prefixes = np.arange(ctx.size)
        else:
            raise DomainError(f"Unknown direction convention '{directions}'")

        self.ctx = ctx
        self.functional = functional
        self.convention = directions
        self.nodes = nodes
        self.prefixes = prefixes
        self.plan = ConditioningPlan(ctx)
        norms = np.einsum('sn,nm,sm->s', rows, ctx.sigma, rows)
        self.direction_norms = norms
        self.weights = (functional.loadings(ctx) @ ctx.sigma @ rows.T) / norms[None, :]
        super().__init__(rows, self._coefficients, self._gradients, deterministic=False,
                         name=f'clark[{functional.name}]',
                         finite_difference=functional.curvature is None)

    def _slot_terms(self, paths, sensitivity):
        paths = np.atleast_2d(paths)
        k = paths.shape[0]
        coeffs = np.zeros((k, self.slots))
        grads = np.zeros((k, self.slots, self.ctx.n_coords)) if sensitivity else None
        if self.functional.n == 0:
            return coeffs, grads
        for s, p in enumerate(self.prefixes):
            out = conditional_gradient(self.ctx, self.functional, int(p), paths, self.nodes,
                                       sensitivity=sensitivity, plan=self.plan)
            if sensitivity:
                grad, sens = out
                grads[:, s, :p] = np.einsum('kip,i->kp', sens, self.weights[:, s])
            else:
                grad = out
            coeffs[:, s] = grad @ self.weights[:, s]
        return coeffs, grads

    def _coefficients(self, paths):
        return self._slot_terms(paths, False)[0]

    def _gradients(self, paths):
        return self._slot_terms(paths, True)[1]

    def evaluate(self, paths):
        return self._slot_terms(paths, True)

    def predictability_gap(self, path, slot, perturbation=1.0):
        """
        Largest change in a_slot when coordinates from the slot's prefix onward are
        perturbed; zero for a predictable rule.
        """
        path = np.asarray(path, dtype=float).reshape(-1)
        moved = path.copy()
        moved[self.prefixes[slot]:] += perturbation
        both = self.coefficients(np.vstack([path, moved]))
        return float(abs(both[0, slot] - both[1, slot]))


def clark_integrand(ctx, functional, directions='innovation', nodes=DEFAULT_NODES):
    return AdaptedVectorField(ctx, functional, directions=directions, nodes=nodes)


def conditional_functional_mean(ctx, functional, p, paths, nodes=DEFAULT_NODES, plan=None,
                                method='quadrature', draws=4096, rng=None):
    """
    M = E[F | first p coordinates] per path; per-term 1-D rules for additive
    functionals, conditional_expectation otherwise.
    """
    paths = np.atleast_2d(paths)
    k = paths.shape[0]
    if functional.n == 0:
        return np.full(k, functional.value(np.zeros((1, 0)))[0])
    loads = functional.loadings(ctx)
    observed = paths[:, :p]
    if p == ctx.n_coords:
        return functional.value(observed @ loads.T)

    if functional.additive:
        law = (plan or ConditioningPlan(ctx)).law(p)
        effective = loads[:, :p] + loads[:, p:] @ law.mean_map
        future = loads[:, p:]
        sd = np.sqrt(np.maximum(np.einsum('ij,jk,ik->i', future, law.covariance, future), 0.0))
        x, w = gauss_hermite_rule(nodes)
        mean = observed @ effective.T
        flat = (mean[:, None, :] + sd[None, None, :] * x[None, :, None]).reshape(-1, functional.n)
        terms = functional.terms(flat).reshape(k, len(w), functional.n)
        return functional.constant + (terms * w[None, :, None]).sum(axis=(1, 2))

    return conditional_expectation_prefix(ctx, functional.value, loads, p, observed,
                                          method=method, nodes=nodes, draws=draws, rng=rng).mean
