import numpy as np
import pytest

from tools.errors import InvalidArgument
from tools.spectral import (BasisKind, apply_semigroup, build_quadrature, build_spectral_space,
                            constant_mode, fit_smoothing_exponent, schatten_norm)


def test_neumann_and_dirichlet_eigenvalues():
    neu = build_spectral_space(4, domain_length=2.0, diffusivity=0.5)
    np.testing.assert_allclose(neu.eigenvalues, 0.5 * (np.pi * np.arange(4) / 2.0) ** 2)
    dir_ = build_spectral_space(4, basis_kind=BasisKind.DIRICHLET_SINE)
    np.testing.assert_allclose(dir_.eigenvalues, (np.pi * np.arange(1, 5)) ** 2)


def test_abstract_space_needs_eigenvalues():
    with pytest.raises(InvalidArgument):
        build_spectral_space(3, basis_kind="abstract_diagonal")
    space = build_spectral_space(3, basis_kind="abstract_diagonal", eigenvalues=[2.0, 0.0, 1.0])
    np.testing.assert_array_equal(space.eigenvalues, [0.0, 1.0, 2.0])
    assert not space.has_spatial_basis


def test_semigroup_property(space, rng):
    x = rng.standard_normal(space.dim_h)
    composed = apply_semigroup(space, 0.02, apply_semigroup(space, 0.03, x))
    np.testing.assert_allclose(composed, apply_semigroup(space, 0.05, x), rtol=1e-13)
    np.testing.assert_array_equal(apply_semigroup(space, 0.0, x), x)


def test_semigroup_rejects_wrong_dimension(space):
    with pytest.raises(InvalidArgument):
        apply_semigroup(space, 0.1, np.ones(space.dim_h + 1))
    with pytest.raises(InvalidArgument):
        space.decay(-1.0)


def test_schatten_norms_of_diagonal():
    op = np.diag([3.0, 4.0])
    assert schatten_norm(op, 1) == pytest.approx(7.0)
    assert schatten_norm(op, 2) == pytest.approx(5.0)
    assert schatten_norm(op, np.inf) == pytest.approx(4.0)
    with pytest.raises(InvalidArgument):
        schatten_norm(op, 0.5)


def test_schatten_norm_of_stack():
    stack = np.stack([np.eye(2), 2.0 * np.eye(2)])
    np.testing.assert_allclose(schatten_norm(stack, np.inf), [1.0, 2.0])


@pytest.mark.parametrize("kappa", [1.0, 2.0, np.inf])
def test_schatten_norms_form_an_operator_ideal(kappa, rng):
    for _ in range(20):
        a, b = rng.standard_normal((2, 6, 6))
        bound = schatten_norm(a, np.inf) * schatten_norm(b, kappa)
        assert schatten_norm(a @ b, kappa) <= bound * (1.0 + 1e-12)
        assert schatten_norm(b @ a, kappa) <= bound * (1.0 + 1e-12)


def test_heat_semigroup_smoothing_exponent():
    _, theta = fit_smoothing_exponent(build_spectral_space(64))
    assert 0.2 <= theta <= 0.3


def test_quadrature_is_orthonormal(space):
    quad = build_quadrature(space)
    gram = (quad.basis * quad.weights[:, None]).T @ quad.basis
    np.testing.assert_allclose(gram, np.eye(space.dim_h), atol=1e-12)


def test_constant_mode_synthesizes_one(space):
    quad = build_quadrature(space)
    np.testing.assert_allclose(quad.synthesize(constant_mode(space)), 1.0, atol=1e-12)
