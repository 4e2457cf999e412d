# tests/unit/test_catalog.py

import logging

import numpy as np
import pytest

from src.catalog import (
    DEFAULT_TEST_FIELDS, FUNCTIONAL_CATALOG, TEST_FIELDS, build_test_field, build_test_fields,
    make_functional, midpoint_position, snap_position,
)
from src.energy_space import GramContext
from src.errors import ConfigError, DomainError
from src.malliavin_ops import gradient_check
from src.model_kernel import CovarianceModel, TimeGrid


def test_every_catalog_functional_has_a_consistent_gradient():
    grid = TimeGrid.regular(8)
    for name in FUNCTIONAL_CATALOG:
        F = make_functional(name, grid)
        assert F.name == name
        assert F.additive
        assert gradient_check(F).passed, name


def test_constant_and_unknown_functionals():
    grid = TimeGrid.regular(4)
    F = make_functional('constant', grid)
    assert F.n == 0
    assert F.value(np.zeros((3, 0))).tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(ConfigError):
        make_functional('cubic', grid)


def test_two_time_value():
    F = make_functional('two_time', TimeGrid.regular(4))
    assert F.indices == (2, 4)
    assert np.isclose(F.value(np.array([[0.3, 0.9]]))[0], np.sin(0.3) + np.cos(0.9))


def test_linear_positions_and_weights():
    F = make_functional('linear', TimeGrid.regular(8))
    assert F.indices == (2, 4, 8)
    assert np.isclose(F.value(np.array([[1.0, 1.0, 1.0]]))[0], 2.5)


def test_off_grid_times_are_snapped_with_warning(caplog):
    grid = TimeGrid.from_times([0.3, 0.5, 1.0])
    with caplog.at_level(logging.WARNING, logger='src.catalog'):
        F = make_functional('linear', grid)
    assert F.indices == (1, 2, 3)
    assert "snapped" in caplog.text
    assert snap_position(grid, 1.0) == 3


def test_colliding_snapped_times_are_rejected():
    with pytest.raises(DomainError):
        make_functional('linear', TimeGrid.regular(2))


def test_midpoint_position():
    assert midpoint_position(TimeGrid.regular(8)) == 4
    assert midpoint_position(TimeGrid.regular(5)) == 3


def test_test_field_suite():
    ctx = GramContext.create(CovarianceModel.fbm(0.25), TimeGrid.regular(4))
    fields = build_test_fields(ctx)
    assert tuple(fields) == DEFAULT_TEST_FIELDS
    assert fields['deterministic'].deterministic
    assert not fields['adapted_affine'].deterministic
    assert np.allclose(fields['adapted_affine'].directions, [[0.0, -1.0, 0.0, 1.0]])
    assert np.allclose(fields['non_adapted_affine'].slope, [[0.0, 0.0, 0.0, 1.0]])
    assert abs(fields['deterministic'].defect(ctx)) == 0.0
    quadratic = build_test_field(ctx, 'quadratic')
    assert np.isclose(quadratic.defect(ctx), ctx.sigma[-1, -1] ** 2)
    with pytest.raises(ConfigError):
        build_test_field(ctx, 'random')
    assert set(TEST_FIELDS) >= set(DEFAULT_TEST_FIELDS)


def test_componentwise_test_fields():
    ctx = GramContext.create(CovarianceModel.mixed(1.0, 1.0, 0.25), TimeGrid.regular(2),
                             direct_sum=True)
    field = build_test_field(ctx, 'deterministic', component=1)
    assert field.name == 'deterministic[BH]'
    assert np.allclose(field.directions, [[0.0, 0.0, 0.0, 1.0]])
    assert build_test_field(ctx, 'deterministic', component=0).name == 'deterministic[B]'
    with pytest.raises(DomainError):
        build_test_field(ctx, 'deterministic', component=2)
