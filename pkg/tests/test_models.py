import numpy as np
import pytest

from tools.errors import InvalidArgument
from tools.models import (HarvestingParams, check_bounds, check_derivatives, make_harvesting_model,
                          make_lq_model, make_random_bounded_model)
from tools.noise import JumpMeasureSpec
from tools.spectral import build_spectral_space, schatten_norm


@pytest.mark.parametrize("name", ["lq_model", "rb_model", "harvesting_model"])
def test_jets_match_finite_differences(name, request):
    errors = check_derivatives(request.getfixturevalue(name), n_points=40)
    assert errors
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-5, worst


@pytest.mark.parametrize("name", ["lq_model", "rb_model", "harvesting_model"])
def test_observation_respects_its_bound(name, request):
    report = check_bounds(request.getfixturevalue(name))
    assert report["h_sup"] <= report["h_bound"]


def test_harvesting_rejects_bad_marks_and_parameters(space):
    with pytest.raises(InvalidArgument):
        make_harvesting_model(space, 2, 1, JumpMeasureSpec(marks=(1.5,), weights=(1.0,)))
    with pytest.raises(InvalidArgument):
        make_harvesting_model(space, 2, 1, JumpMeasureSpec(), HarvestingParams(sigma=0.0))


def test_harvesting_needs_a_spatial_basis():
    abstract = build_spectral_space(3, basis_kind="abstract_diagonal", eigenvalues=[0.0, 1.0, 4.0])
    with pytest.raises(InvalidArgument):
        make_harvesting_model(abstract, 2, 1, JumpMeasureSpec())


def test_harvesting_layout(harvesting_model):
    m = harvesting_model
    np.testing.assert_array_equal(m.box_lo, [0.0])
    assert m.sensor.shape == (m.d, m.N)
    np.testing.assert_allclose(m.x0, 0.6 * m.c1)


def test_random_bounded_norms_and_seed(space, jm):
    a = make_random_bounded_model(space, 3, 2, jm, seed=7)
    b = make_random_bounded_model(space, 3, 2, jm, seed=7)
    c = make_random_bounded_model(space, 3, 2, jm, seed=8)
    assert all(v <= 1.0 + 1e-12 for v in a.operator_norms().values())
    np.testing.assert_array_equal(a.A_F, b.A_F)
    assert not np.array_equal(a.A_F, c.A_F)


def test_null_mark_quadrature(space):
    m = make_lq_model(space, 2, 1, JumpMeasureSpec())
    assert (m.K, m.Kq) == (0, 1)
    np.testing.assert_array_equal(m.quad_weights, [1.0])
    state = m.zero_backward_state(3)
    assert state.gamma.shape == (3, 1, 1)
    jet = m.driver(0.0, np.zeros((3, m.N)), np.zeros((3, 1)), state)
    assert jet.value.shape == (3, 1, 1)


def test_harvesting_terminal_cost_targets_total_stock(jm):
    space = build_spectral_space(6, domain_length=2.0)
    m = make_harvesting_model(space, 2, 1, jm, HarvestingParams(beta=1.0, x_T_star=0.8))
    density = np.stack([0.8 * m.c1, 0.4 * m.c1])         # integrals 1.6 and 0.8
    jet = m.terminal_cost(density)
    np.testing.assert_allclose(jet.value, [0.32, 0.0], atol=1e-12)
    np.testing.assert_allclose(jet.d_x[0], 0.8 * m.c1, atol=1e-12)


@pytest.mark.parametrize("name", ["lq_model", "rb_model", "harvesting_model"])
def test_bounds_report_covers_costs_and_driver(name, request):
    report = check_bounds(request.getfixturevalue(name), n_points=200)
    for key in ("g.x", "g.y", "g.gamma", "f.x", "L.x", "L.u", "phi.x", "psi.y"):
        assert key in report and np.isfinite(report[key])


def test_random_bounded_driver_and_terminal_derivatives_are_bounded(rb_model):
    report = check_bounds(rb_model, n_points=200)
    for arg in ("x", "u", "y", "z", "r", "gamma"):
        assert report[f"g.{arg}"] <= 1.0
    assert report["f.x"] <= 1.0
    assert report["psi.y"] == 1.0
    assert report["h.x"] <= 1.0 and report["h.u"] <= 1.0


def test_random_bounded_draws_extend_with_dim_h(jm):
    small = make_random_bounded_model(build_spectral_space(6), 2, 1, jm, seed=3)
    big = make_random_bounded_model(build_spectral_space(12), 2, 1, jm, seed=3)
    pairs = {"A_F": (small.A_F, big.A_F[:6, :6]), "K_0": (small.K_ops[0], big.K_ops[0, :6, :6]),
             "hx": (small.hx, big.hx[:, :6]), "fx": (small.fx, big.fx[:6])}
    for name, (a, lead) in pairs.items():
        ratio = np.vdot(a, lead) / np.vdot(lead, lead)
        np.testing.assert_allclose(a, ratio * lead, rtol=1e-10, atol=1e-14, err_msg=name)
    np.testing.assert_array_equal(small.gz, big.gz)


def test_random_bounded_trace_norms_settle_as_dim_h_grows(jm):
    norms = [schatten_norm(make_random_bounded_model(build_spectral_space(n), 2, 1, jm, seed=3).K_ops[0], 1)
             for n in (16, 32)]
    assert abs(norms[1] - norms[0]) <= 0.15 * norms[0]


def test_random_bounded_rejects_negative_seed(space, jm):
    with pytest.raises(InvalidArgument):
        make_random_bounded_model(space, 2, 1, jm, seed=-1)
