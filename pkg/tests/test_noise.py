import math

import numpy as np
import pytest
from scipy.integrate import quad

from fracheat.errors import ModelError, ValidationError
from fracheat.noise import (CorrelationModel, build_covariance, covariance_matrix, dalang_check, make_sampler,
                            white_sampler)
from fracheat.operator import DomainGrid


@pytest.mark.parametrize("kwargs", [dict(kind="riesz", gamma=1.2), dict(kind="riesz", gamma=0.0),
                                    dict(kind="cauchy", theta=-1.0), dict(kind="constant", K=0.0),
                                    dict(kind="pink")])
def test_invalid_models(kwargs):
    with pytest.raises(ValidationError):
        CorrelationModel(**kwargs)


@pytest.mark.parametrize("model, alpha, ok", [
    (CorrelationModel.white(), 1.5, True), (CorrelationModel.white(), 1.0, False),
    (CorrelationModel.riesz(0.5), 0.4, False), (CorrelationModel.riesz(0.5), 0.6, True),
    (CorrelationModel.cauchy(0.3), 0.2, True), (CorrelationModel.constant(2.0), 0.5, True),
])
def test_dalang_condition(model, alpha, ok):
    assert dalang_check(model, alpha).passed is ok


def test_white_has_no_covariance_matrix():
    with pytest.raises(ModelError):
        build_covariance(CorrelationModel.white(), DomainGrid(1.0, 16))


def test_riesz_floor_is_attained_at_the_far_corners():
    g = DomainGrid(1.0, 64)
    s = build_covariance(CorrelationModel.riesz(0.5), g)
    assert s.floor == pytest.approx(((g.N - 1) * g.h) ** -0.5)
    assert s.floor > (2 * g.R) ** -0.5
    assert not s.warnings


def test_riesz_diagonal_is_cell_average():
    g = DomainGrid(1.0, 16)
    C = covariance_matrix(CorrelationModel.riesz(0.4), g)
    half, _ = quad(lambda z: 1.0, 0.0, g.h / 2, weight="alg", wvar=(-0.4, 0.0))
    assert C[0, 0] == pytest.approx(2 * half / g.h, rel=1e-10)


def test_cauchy_covariance_values():
    g = DomainGrid(1.0, 8)
    C = covariance_matrix(CorrelationModel.cauchy(0.5), g)
    d = g.nodes[3] - g.nodes[0]
    assert C[0, 3] == pytest.approx(1 / (1 + (d / 0.5) ** 2))


def test_constant_floor_increments_are_spatially_constant():
    g = DomainGrid(1.0, 32)
    s = build_covariance(CorrelationModel.constant(2.0), g, seed=5)
    dF = s.sample_block(0.01, 0, 0, 200)
    # Cholesky jitter leaves a residual of order sqrt(jitter) per node
    spread = (dF.max(axis=0) - dF.min(axis=0)) / math.sqrt(2.0 * 0.01)
    assert spread.max() < 1e-4
    assert np.var(dF[0]) == pytest.approx(0.02, rel=0.3)


def test_white_increment_variance():
    g = DomainGrid(1.0, 32)
    dF = white_sampler(g, 3).sample_block(1e-3, 0, 0, 20000)
    assert dF.var() * g.h / 1e-3 == pytest.approx(1.0, abs=0.01)


def test_colored_increment_covariance():
    g = DomainGrid(1.0, 16)
    s = build_covariance(CorrelationModel.cauchy(0.5), g, seed=9)
    dF = s.sample_block(0.5, 2, 0, 40000)
    emp = dF @ dF.T / dF.shape[1]
    np.testing.assert_allclose(emp, 0.5 * s.covariance, atol=0.03)


def test_increment_is_reproducible_per_path():
    g = DomainGrid(1.0, 16)
    s = make_sampler(CorrelationModel.riesz(0.5), g, seed=4)
    block = s.sample_block(0.1, 7, 10, 5)
    # same normals; the factor product may round differently for one column
    np.testing.assert_allclose(block[:, 2], s.sample_increment(0.1, 12, 7), rtol=1e-13, atol=1e-15)
    assert not np.array_equal(block, s.with_seed(5).sample_block(0.1, 7, 10, 5))


def test_seed_validation():
    with pytest.raises(ValidationError):
        white_sampler(DomainGrid(1.0, 16), -1)
