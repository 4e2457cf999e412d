# src/catalog.py
"""
Built-in functionals and the affine test-field suite.

Catalog entries are built per grid; functional times that miss the grid are
snapped to the nearest grid point with a warning.
"""

import logging
import math

import numpy as np

from src.errors import ConfigError, DomainError
from src.malliavin_ops import (
    AffineField, IntegralFunctional, additive_functional, constant_functional,
    discretize_integral_functional,
)

logger = logging.getLogger(__name__)

LINEAR_WEIGHTS = (1.0, -0.5, 2.0)
LINEAR_FRACTIONS = (0.25, 0.5, 1.0)

TEST_FIELDS = ('deterministic', 'adapted_affine', 'non_adapted_affine', 'quadratic')
DEFAULT_TEST_FIELDS = TEST_FIELDS[:3]


def snap_position(grid, t, name='functional'):
    """1-based grid position of t; off-grid times go to the nearest point."""
    pos = grid.position_of(t)
    if pos is None:
        pos = grid.nearest_position(t)
        logger.warning("Functional '%s': time %.6g is off the grid, snapped to t_%d = %.6g",
                       name, t, pos, grid.times[pos - 1])
    return pos


def _snap_all(grid, fractions, name):
    positions = [snap_position(grid, f * grid.horizon, name) for f in fractions]
    if len(set(positions)) != len(positions):
        raise DomainError(f"Functional '{name}' needs {len(positions)} distinct grid times; "
                          f"grid of {grid.size} points is too coarse")
    return positions


def _columnwise(*maps):
    # Column k of the input goes through maps[k]
    def apply(x):
        return np.column_stack([f(x[:, k]) for k, f in enumerate(maps)])
    return apply


def quadratic(grid):
    """F = X_T^2."""
    pos = snap_position(grid, grid.horizon, 'quadratic')
    return additive_functional(
        'quadratic', (pos,),
        phi=lambda x: x ** 2, dphi=lambda x: 2.0 * x, d2phi=lambda x: np.full_like(x, 2.0),
    )


def two_time(grid):
    """F = sin(X_{T/2}) + cos(X_T)."""
    a, b = _snap_all(grid, (0.5, 1.0), 'two_time')
    return additive_functional(
        'two_time', (a, b),
        phi=_columnwise(np.sin, np.cos),
        dphi=_columnwise(np.cos, lambda x: -np.sin(x)),
        d2phi=_columnwise(lambda x: -np.sin(x), lambda x: -np.cos(x)),
    )


def linear(grid):
    positions = _snap_all(grid, LINEAR_FRACTIONS, 'linear')
    w = np.asarray(LINEAR_WEIGHTS)
    return additive_functional(
        'linear', positions,
        phi=lambda x: x * w[None, :],
        dphi=lambda x: np.broadcast_to(w, x.shape).copy(),
        d2phi=lambda x: np.zeros_like(x),
    )


def terminal_exp(grid):
    pos = snap_position(grid, grid.horizon, 'terminal_exp')
    return additive_functional('terminal_exp', (pos,), phi=np.exp, dphi=np.exp, d2phi=np.exp)


def integral_sin(grid):
    """F = int_0^T sin(X_s) ds, trapezoid on the grid."""
    return discretize_integral_functional(
        IntegralFunctional('integral_sin',
                           integrand=lambda s, x: np.sin(x),
                           dx=lambda s, x: np.cos(x),
                           dxx=lambda s, x: -np.sin(x)),
        grid,
    )


def integral_square(grid):
    return discretize_integral_functional(
        IntegralFunctional('integral_square',
                           integrand=lambda s, x: x ** 2,
                           dx=lambda s, x: 2.0 * x,
                           dxx=lambda s, x: np.full_like(np.asarray(x, dtype=float), 2.0)),
        grid,
    )


FUNCTIONAL_CATALOG = {
    'quadratic': (quadratic, 'X_T^2'),
    'two_time': (two_time, 'sin(X_{T/2}) + cos(X_T)'),
    'integral_sin': (integral_sin, 'int_0^T sin(X_s) ds'),
    'integral_square': (integral_square, 'int_0^T X_s^2 ds'),
    'linear': (linear, 'X_{T/4} - 0.5 X_{T/2} + 2 X_T'),
    'terminal_exp': (terminal_exp, 'exp(X_T)'),
}


def make_functional(name, grid):
    """
    Build a catalog functional for the grid; 'constant' gives F = 1.

    :raises ConfigError: for an unknown name
    """
    if name == 'constant':
        return constant_functional(1.0)
    if name not in FUNCTIONAL_CATALOG:
        raise ConfigError(f"Unknown functional '{name}'; choose from {', '.join(FUNCTIONAL_CATALOG)}")
    return FUNCTIONAL_CATALOG[name][0](grid)


def midpoint_position(grid):
    return int(math.ceil(grid.size / 2))


def _direction(ctx, position, component):
    # Read-out row of X_{t_position}, or the unit vector of one direct-sum component
    if component is None:
        return np.array(ctx.readout[position - 1])
    if not 0 <= component < ctx.block:
        raise DomainError(f"Component {component} outside 0..{ctx.block - 1}")
    out = np.zeros(ctx.n_coords)
    out[(position - 1) * ctx.block + component] = 1.0
    return out


def build_test_field(ctx, name, component=None):
    """
    One affine test field u = a * d.

    deterministic: a = 1, d = k_T. adapted_affine: a = X_{t_m}, d = k_T - k_{t_m}.
    non_adapted_affine: a = X_T, d = k_{t_m}. quadratic: a = X_T, d = k_T.
    m = ceil(N / 2). With a component index the direction lives on that
    direct-sum component only.
    """
    n = ctx.size
    m = midpoint_position(ctx.grid)
    x_t = ctx.readout[n - 1]
    x_m = ctx.readout[m - 1]
    k_t = _direction(ctx, n, component)
    k_m = _direction(ctx, m, component)
    zero = np.zeros(ctx.n_coords)

    if name == 'deterministic':
        offset, slope, direction = 1.0, zero, k_t
    elif name == 'adapted_affine':
        offset, slope, direction = 0.0, x_m, k_t - k_m
    elif name == 'non_adapted_affine':
        offset, slope, direction = 0.0, x_t, k_m
    elif name == 'quadratic':
        offset, slope, direction = 0.0, x_t, k_t
    else:
        raise ConfigError(f"Unknown test field '{name}'; choose from {', '.join(TEST_FIELDS)}")

    label = name if component is None else f'{name}[{("B", "BH")[component]}]'
    return AffineField([offset], slope[None, :], direction[None, :], name=label)


def build_test_fields(ctx, names=DEFAULT_TEST_FIELDS, component=None):
    return {name: build_test_field(ctx, name, component) for name in names}
