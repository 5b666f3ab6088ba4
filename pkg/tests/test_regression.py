import numpy as np
import pytest

from tools.errors import RegressionError, ShapeError
from tools.regression import ConditionalExpectation, RegressionBasis, RegressionKind

LINEAR = RegressionBasis(kind=RegressionKind.MODE_LINEAR, ridge=0.0)


def test_quadratic_monomials_respect_the_feature_cap():
    basis = RegressionBasis()
    assert len(basis.monomials(2, 1000)) == 6
    assert len(basis.monomials(3, 50)) == 5


def test_too_few_paths_for_the_linear_basis():
    with pytest.raises(RegressionError):
        ConditionalExpectation(RegressionBasis(), np.ones((20, 2)))


def test_linear_response_is_recovered_exactly(rng):
    z = rng.standard_normal((200, 2))
    response = 2.0 + 3.0 * z[:, 0] - z[:, 1]
    fitted = ConditionalExpectation(LINEAR, z).fit(response)
    np.testing.assert_allclose(fitted.values, response, atol=1e-10)
    z_new = rng.standard_normal((5, 2))
    np.testing.assert_allclose(fitted.predict(z_new), 2.0 + 3.0 * z_new[:, 0] - z_new[:, 1], atol=1e-10)


def test_predict_matches_in_sample_values(rng):
    z = rng.standard_normal((300, 3))
    response = np.stack([np.sin(z[:, 0]), z[:, 1] * z[:, 2]], axis=1)
    fitted = ConditionalExpectation(RegressionBasis(), z).fit(response)
    assert fitted.values.shape == (300, 2)
    np.testing.assert_allclose(fitted.predict(z), fitted.values, atol=1e-12)


def test_residual_is_orthogonal_to_features(rng):
    z = rng.standard_normal((250, 2))
    response = np.exp(z[:, 0]) + rng.standard_normal(250)
    assert ConditionalExpectation(LINEAR, z).residual_orthogonality(response) < 1e-10


def test_constant_columns_are_dropped(rng):
    z = np.column_stack([rng.standard_normal(100), np.full(100, 3.0)])
    proj = ConditionalExpectation(LINEAR, z)
    assert proj.n_features == 2
    np.testing.assert_allclose(proj.project(z[:, 0]), z[:, 0], atol=1e-10)


def test_duplicate_columns_are_degenerate(rng):
    col = rng.standard_normal(200)
    with pytest.raises(RegressionError):
        ConditionalExpectation(LINEAR, np.column_stack([col, col]))


def test_weights_must_match_paths(rng):
    z = rng.standard_normal((100, 1))
    with pytest.raises(ShapeError):
        ConditionalExpectation(LINEAR, z, weights=np.ones(99))
    proj = ConditionalExpectation(LINEAR, z, weights=np.ones(100))
    with pytest.raises(ShapeError):
        proj.fit(np.ones(50))
