# tests/unit/test_malliavin_ops.py

import numpy as np
import pytest

from src.catalog import linear, quadratic, two_time
from src.energy_space import GramContext, project_adapted, representer
from src.errors import ContractError, DimensionError, DomainError
from src.gaussian_engine import RngStream, sample_ensemble
from src.malliavin_ops import (
    AffineField, CylindricalFunctional, DivergenceInput, IntegralFunctional, additive_functional,
    clark_integrand, conditional_functional_mean, conditional_gradient, derivative,
    derivative_coefficients, discretize_integral_functional, divergence, field_norm_sq,
    gradient_check, linear_combination, pairing_with_field, predictable_projection,
    trapezoid_weights, with_finite_difference,
)
from src.model_kernel import CovarianceModel, TimeGrid


@pytest.fixture
def bm_ctx():
    return GramContext.create(CovarianceModel.bm(), TimeGrid.regular(4))


@pytest.fixture
def fbm_ctx():
    return GramContext.create(CovarianceModel.fbm(0.25), TimeGrid.regular(4))


@pytest.fixture
def paths(fbm_ctx):
    return sample_ensemble(fbm_ctx, 200, RngStream(21)).paths


def test_derivative_of_terminal_square(bm_ctx):
    F = quadratic(bm_ctx.grid)
    d = derivative(bm_ctx, F, [0.7])
    assert np.allclose(d.coeffs, [0.0, 0.0, 0.0, 1.4])
    with pytest.raises(DimensionError):
        derivative(bm_ctx, F, [0.7, 0.1])


def test_derivative_coefficients_rows(fbm_ctx, paths):
    F = quadratic(fbm_ctx.grid)
    rows = derivative_coefficients(fbm_ctx, F, paths)
    assert rows.shape == paths.shape
    assert np.allclose(rows[:, -1], 2.0 * paths[:, -1])
    assert np.allclose(rows[:, :-1], 0.0)


def test_functional_positions_must_increase():
    with pytest.raises(DomainError):
        CylindricalFunctional('bad', (3, 2), value=lambda x: x.sum(axis=1))


def test_functional_beyond_grid(bm_ctx):
    F = quadratic(TimeGrid.regular(8))
    with pytest.raises(DimensionError):
        F.loadings(bm_ctx)


def test_gradient_check():
    grid = TimeGrid.regular(4)
    for F in (quadratic(grid), two_time(grid), linear(grid)):
        assert gradient_check(F).passed
    wrong = additive_functional('wrong', (1,), phi=np.sin, dphi=np.sin, d2phi=np.cos)
    check = gradient_check(wrong)
    assert not check.passed
    assert check.points == 100


def test_finite_difference_fallback(caplog):
    F = CylindricalFunctional('cubic', (1, 2), value=lambda x: x[:, 0] ** 3 + x[:, 1])
    filled = with_finite_difference(F)
    assert filled.finite_difference
    x = np.array([[1.5, -2.0]])
    assert np.allclose(filled.gradient(x), [[3 * 1.5 ** 2, 1.0]], atol=1e-6)
    assert "finite differences" in caplog.text
    assert with_finite_difference(filled) is filled


def test_linear_combination():
    grid = TimeGrid.regular(4)
    combo = linear_combination([quadratic(grid), two_time(grid)], [2.0, -1.0])
    assert combo.indices == (2, 4)
    x = np.array([[0.3, 0.8]])
    assert np.isclose(combo.value(x)[0], 2 * 0.8 ** 2 - (np.sin(0.3) + np.cos(0.8)))
    assert np.allclose(combo.gradient(x), [[-np.cos(0.3), 4 * 0.8 + np.sin(0.8)]])
    assert combo.additive


def test_trapezoid_weights_integrate_constants():
    grid = TimeGrid.from_times([0.1, 0.4, 1.0])
    w = trapezoid_weights(grid)
    assert np.isclose(w.sum(), 1.0)
    assert np.isclose(w[0], 0.05)


def test_integral_functional_discretization():
    grid = TimeGrid.regular(4)
    F = discretize_integral_functional(
        IntegralFunctional('square', lambda s, x: x ** 2, lambda s, x: 2 * x), grid)
    ones = np.ones((1, 4))
    # every node but the origin contributes 1 * weight
    assert np.isclose(F.value(ones)[0], 1.0 - 0.125)
    assert np.allclose(F.gradient(ones), [[0.5, 0.5, 0.5, 0.25]])
    with pytest.raises(DomainError):
        discretize_integral_functional(IntegralFunctional('x', lambda s, x: x, lambda s, x: 1 + 0 * x),
                                       TimeGrid((0.5,), 1.0))


def test_divergence_of_deterministic_field_is_isonormal(fbm_ctx, paths):
    h = np.array([0.5, -1.0, 0.0, 2.0])
    u = AffineField([1.0], np.zeros((1, 4)), h[None, :])
    assert u.deterministic
    assert np.allclose(divergence(fbm_ctx, u, paths), paths @ h)


def test_divergence_of_quadratic_field(fbm_ctx, paths):
    # u = X_T k_T gives delta(u) = X_T^2 - Sigma_TT on every path
    k_t = fbm_ctx.readout[-1]
    u = AffineField([0.0], k_t[None, :], k_t[None, :], name='quadratic')
    sigma_tt = fbm_ctx.sigma[-1, -1]
    assert np.allclose(divergence(fbm_ctx, u, paths), paths[:, -1] ** 2 - sigma_tt)
    assert np.isclose(u.defect(fbm_ctx), sigma_tt ** 2)
    assert np.isclose(u.expected_norm_sq(fbm_ctx), sigma_tt ** 2)
    assert np.allclose(field_norm_sq(fbm_ctx, u, paths), paths[:, -1] ** 2 * sigma_tt)


def test_divergence_single_path_and_dimension_check(fbm_ctx):
    u = AffineField([1.0], np.zeros((1, 4)), np.ones((1, 4)))
    assert isinstance(divergence(fbm_ctx, u, np.ones(4)), float)
    with pytest.raises(DimensionError):
        divergence(fbm_ctx, u, np.ones((3, 2)))


def test_random_coefficients_need_gradient_rule(fbm_ctx, paths):
    u = DivergenceInput(np.ones((1, 4)), lambda z: z[:, :1])
    with pytest.raises(ContractError):
        divergence(fbm_ctx, u, paths)


def test_adapted_defect_vanishes_only_for_brownian(bm_ctx, fbm_ctx):
    def adapted(ctx):
        m = 2
        return AffineField([0.0], ctx.readout[m - 1][None, :],
                           (ctx.readout[-1] - ctx.readout[m - 1])[None, :])

    assert abs(adapted(bm_ctx).defect(bm_ctx)) < 1e-14
    assert adapted(fbm_ctx).defect(fbm_ctx) > 1e-3


def test_pairing_with_field(fbm_ctx, paths):
    F = quadratic(fbm_ctx.grid)
    k_t = fbm_ctx.readout[-1]
    u = AffineField([1.0], np.zeros((1, 4)), k_t[None, :])
    pairing = pairing_with_field(fbm_ctx, derivative_coefficients(fbm_ctx, F, paths), u, paths)
    assert np.allclose(pairing, 2.0 * paths[:, -1] * fbm_ctx.sigma[-1, -1])


def test_conditional_gradient_at_full_information(fbm_ctx, paths):
    F = two_time(fbm_ctx.grid)
    grad = conditional_gradient(fbm_ctx, F, 4, paths)
    assert np.allclose(grad, F.gradient(F.observe(fbm_ctx, paths)))


def test_conditional_gradient_of_square(fbm_ctx, paths):
    # E[2 X_T | prefix] = 2 E[X_T | prefix]
    F = quadratic(fbm_ctx.grid)
    grad, sens = conditional_gradient(fbm_ctx, F, 2, paths, sensitivity=True)
    expected = project_adapted(fbm_ctx, representer(fbm_ctx, 4), 2).coeffs
    assert np.allclose(grad[:, 0], 2.0 * paths @ expected)
    assert np.allclose(sens[:, 0, :], 2.0 * expected[:2])


def test_predictable_projection_of_brownian_linear_functional(bm_ctx):
    F = linear(bm_ctx.grid)
    # positions T/4, T/2, T with weights 1, -0.5, 2; at j = 1 everything is in the future
    projected = predictable_projection(bm_ctx, F, 1, [0.3])
    assert np.allclose(projected.coeffs, [2.5, 0.0, 0.0, 0.0])
    full = predictable_projection(bm_ctx, F, 4, [0.1, 0.2, 0.3, 0.4])
    assert np.allclose(full.coeffs, derivative(bm_ctx, F, [0.1, 0.2, 0.4]).coeffs)
    with pytest.raises(DimensionError):
        predictable_projection(bm_ctx, F, 2, [0.3])


def test_clark_integrand_reproduces_linear_functional(fbm_ctx, paths):
    F = linear(fbm_ctx.grid)
    u = clark_integrand(fbm_ctx, F)
    mean = conditional_functional_mean(fbm_ctx, F, 0, paths[:1])[0]
    residual = F.evaluate(fbm_ctx, paths) - mean - divergence(fbm_ctx, u, paths)
    assert np.max(np.abs(residual)) < 1e-9


def test_clark_integrand_is_predictable(fbm_ctx, paths):
    u = clark_integrand(fbm_ctx, quadratic(fbm_ctx.grid))
    for slot in range(u.slots):
        assert u.predictability_gap(paths[0], slot) < 1e-10


def test_clark_increment_directions(bm_ctx):
    F = quadratic(bm_ctx.grid)
    innovation = clark_integrand(bm_ctx, F)
    increment = clark_integrand(bm_ctx, F, directions='increment')
    assert np.allclose(innovation.directions, increment.directions, atol=1e-12)
    with pytest.raises(DomainError):
        clark_integrand(bm_ctx, F, directions='sideways')
    mixed = GramContext.create(CovarianceModel.mixed(1.0, 1.0, 0.25), TimeGrid.regular(2),
                               direct_sum=True)
    with pytest.raises(DomainError):
        clark_integrand(mixed, quadratic(mixed.grid), directions='increment')


def test_conditional_functional_mean(fbm_ctx, paths):
    F = quadratic(fbm_ctx.grid)
    assert np.allclose(conditional_functional_mean(fbm_ctx, F, 0, paths[:3]), fbm_ctx.sigma[-1, -1])
    assert np.allclose(conditional_functional_mean(fbm_ctx, F, 4, paths), paths[:, -1] ** 2)


def _predictable_field(ctx):
    # a_1 = 1 on k_1, then a_s = 0.5 + X_{t_{s-1}} on the increment k_s - k_{s-1}
    previous = np.vstack([np.zeros((1, ctx.n_coords)), ctx.readout[:-1]])
    offset = np.r_[1.0, np.full(ctx.size - 1, 0.5)]
    return AffineField(offset, previous, ctx.readout - previous, name='predictable')


def test_brownian_divergence_of_predictable_field_is_ito_sum(bm_ctx):
    u = _predictable_field(bm_ctx)
    paths = sample_ensemble(bm_ctx, 500, RngStream(29)).paths
    x = np.hstack([np.zeros((500, 1)), paths @ bm_ctx.readout.T])
    coefficients = np.column_stack([np.ones(500), 0.5 + x[:, 1:-1]])
    ito = np.sum(coefficients * np.diff(x, axis=1), axis=1)
    assert np.allclose(divergence(bm_ctx, u, paths), ito, atol=1e-12)
    assert abs(u.defect(bm_ctx)) < 1e-14


def test_ito_isometry_holds_only_at_brownian_covariance(bm_ctx, fbm_ctx):
    u = _predictable_field(bm_ctx)
    paths = sample_ensemble(bm_ctx, 20000, RngStream(31)).paths
    gap = divergence(bm_ctx, u, paths) ** 2 - field_norm_sq(bm_ctx, u, paths)
    se = gap.std(ddof=1) / np.sqrt(gap.size)
    assert abs(gap.mean()) <= 3 * se
    assert np.isclose(np.mean(field_norm_sq(bm_ctx, u, paths)), u.expected_norm_sq(bm_ctx),
                      rtol=0.05)

    rough = _predictable_field(fbm_ctx)
    assert rough.defect(fbm_ctx) > 1e-3


def test_derivative_is_linear_on_general_functionals(fbm_ctx, paths):
    product = CylindricalFunctional('product', (1, 3), value=lambda x: x[:, 0] * x[:, 1],
                                    gradient=lambda x: x[:, ::-1].copy())
    damped = CylindricalFunctional(
        'damped', (2, 3), value=lambda x: np.exp(x[:, 0]) * np.cos(x[:, 1]),
        gradient=lambda x: np.column_stack([np.exp(x[:, 0]) * np.cos(x[:, 1]),
                                            -np.exp(x[:, 0]) * np.sin(x[:, 1])]))
    combo = linear_combination([product, damped], [2.0, -0.7])
    assert not combo.additive
    expected = (2.0 * derivative_coefficients(fbm_ctx, product, paths)
                - 0.7 * derivative_coefficients(fbm_ctx, damped, paths))
    assert np.allclose(derivative_coefficients(fbm_ctx, combo, paths), expected)

    x = combo.observe(fbm_ctx, paths[:1])[0]
    single = derivative(fbm_ctx, combo, x).coeffs
    assert np.allclose(single, expected[0])
