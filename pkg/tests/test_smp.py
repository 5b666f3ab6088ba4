from dataclasses import replace

import numpy as np
import pytest

from tools.errors import InvalidArgument
from tools.girsanov import variation_lambda
from tools.models import LqParams, make_lq_model
from tools.policy import PolicyParams
from tools.smp import (AdjointBundle, CommonNoiseCost, OptimizerOptions, SmpGradient, box_face_check,
                       build_hat_ensemble, difference_scaling, duality_check_direct, duality_ladder,
                       first_variation_I, gradient_from_bracket, newton_reference_optimum,
                       optimize_policy, perturbed_run, random_direction, smp_consistency,
                       smp_gradient, solve_costate, variation_report)

N_SE = 4.0


@pytest.fixture
def rb_hat(rb_model, make_batch, basis):
    policy = PolicyParams.constant(0.2, n_knots=2, control_dim=1, d=1)
    return build_hat_ensemble(rb_model, policy, make_batch(M=800, seed=17), basis)


def test_gradient_needs_policy_features(rb_hat):
    bare = replace(rb_hat.path, phi=None)
    with pytest.raises(InvalidArgument):
        gradient_from_bracket(rb_hat.policy, bare, np.zeros(rb_hat.path.u.shape))


def test_stationarity_uses_standard_errors():
    grad = SmpGradient(values=np.array([[[0.1]]]), std_error=np.array([[[0.05]]]),
                       per_path=np.zeros((2, 1, 1, 1)), bracket=np.zeros((2, 1, 1)))
    assert grad.is_stationary(3.0)
    assert not grad.is_stationary(1.0)
    assert grad.z_scores[0, 0, 0] == pytest.approx(2.0)
    assert grad.table()[0]["value"] == pytest.approx(0.1)


def test_gradient_shapes_and_face_rows(rb_hat):
    grad = smp_gradient(AdjointBundle(hat=rb_hat, costate=solve_costate(rb_hat)))
    assert grad.values.shape == rb_hat.policy.theta.shape
    assert np.all(np.isfinite(grad.values)) and np.all(grad.std_error > 0)
    rows = box_face_check(grad, rb_hat)
    assert len(rows) == 2 * rb_hat.policy.n_knots * rb_hat.model.control_dim
    assert {r.face for r in rows} == {"lo", "hi"}


def test_first_variation_is_linear_in_the_direction(rb_hat, rng):
    _, v = random_direction(rb_hat, rng)
    once = first_variation_I(rb_hat, v)
    twice = first_variation_I(rb_hat, 2.0 * v)
    assert twice.I_v == pytest.approx(2.0 * once.I_v, rel=1e-8, abs=1e-12)


def test_direct_duality(rb_hat, rng):
    _, v = random_direction(rb_hat, rng)
    report = duality_check_direct(rb_hat, v)
    assert abs(report.residual) <= N_SE * report.std_error + 1e-12


def test_truncated_duality_ladder(rb_hat, rng):
    _, v = random_direction(rb_hat, rng)
    reports = duality_ladder(rb_hat, [1, 2, 4], v)
    assert [r.truncation_n for r in reports] == [1, 2, 4]
    for r in reports:
        assert abs(r.residual) <= N_SE * r.std_error + 1e-12


def test_first_variation_matches_the_gradient(rb_hat):
    rows = smp_consistency(rb_hat, n_directions=2, seed=1, n_se=N_SE)
    assert len(rows) == 2
    assert all(r.passed for r in rows), [(r.difference, r.std_error) for r in rows]


def test_first_variation_matches_finite_differences(rb_hat, rng):
    _, v = random_direction(rb_hat, rng)
    rep = variation_report(rb_hat, v, [0.04, 0.02, 0.01])
    assert rep.errors_decreasing, rep.errors
    assert rep.agreement <= 0.05, (rep.I_v, rep.fd_slopes)
    assert np.sign(rep.I_v) == np.sign(rep.fd_slopes[0.01])


def test_perturbation_differences_scale_quadratically(rb_hat, rng):
    _, v = random_direction(rb_hat, rng)
    rep = difference_scaling(rb_hat, v, [0.1, 0.05, 0.025])
    assert rep.x_slope == pytest.approx(2.0, abs=0.3)
    assert rep.rho_slope == pytest.approx(2.0, abs=0.3)


def test_density_variation_is_the_log_weight_derivative(rb_hat, rng):
    _, v = random_direction(rb_hat, rng)
    fv = first_variation_I(rb_hat, v)
    lam = variation_lambda(rb_hat.model, rb_hat.lin, fv.x1, v)
    np.testing.assert_allclose(lam, fv.lam)
    assert np.all(lam[:, 0] == 0.0)

    def gap(eps):
        _, _, logw = perturbed_run(rb_hat, v, eps)
        return float(np.mean(np.abs(np.expm1(logw[:, -1]) / eps - lam[:, -1])))

    coarse, fine = gap(0.02), gap(0.005)
    assert fine <= 0.6 * coarse + 1e-12
    assert fine <= 0.05 * float(np.mean(np.abs(lam[:, -1]))) + 1e-12


def test_optimizer_does_not_increase_the_cost(lq_model, make_batch, basis):
    pp0 = PolicyParams.constant(0.0, n_knots=2, control_dim=1, d=1)
    result = optimize_policy(lq_model, pp0, make_batch(M=400, seed=2), basis,
                             OptimizerOptions(step=0.5, iters=3))
    assert result.status in {"converged", "stationary", "max_iters"}
    assert result.policy.theta.shape == pp0.theta.shape
    assert 1 <= len(result.history) <= 3
    costs = [rec.J for rec in result.history]
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    assert result.cost.J_estimate <= costs[0] + 1e-12


def test_newton_reference_lowers_a_quadratic_cost(space, jm, make_batch, basis):
    model = make_lq_model(space, 4, 1, jm, LqParams(h_gain=0.0))
    pp = PolicyParams.constant(0.0, n_knots=2, control_dim=1, d=1, features="constant")
    cost = CommonNoiseCost(model, pp, make_batch(M=300, seed=8), basis)
    start = cost(pp.theta)
    result = newton_reference_optimum(cost, pp.theta, n_iter=2)
    assert result.theta.shape == pp.theta.shape
    assert result.J <= start + 1e-12
    assert result.hessian.shape == (2, 2)
