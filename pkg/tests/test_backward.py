import numpy as np
import pytest

from tools.backward import (BspdeCoeffs, build_projectors, martingale_residuals, replay_bsde,
                            solve_bsde, solve_ell, solve_singular_bspde, trace_diagnostic)
from tools.errors import InvalidArgument, PicardError
from tools.forward import EquationForm, simulate_forward
from tools.models import make_random_bounded_model
from tools.policy import PolicyParams
from tools.regression import RegressionBasis, RegressionKind
from tools.smp import build_hat_ensemble, solve_costate
from tools.spectral import build_spectral_space


@pytest.fixture
def lq_path(lq_model, make_batch):
    policy = PolicyParams.constant(0.5, n_knots=2, control_dim=1, d=1)
    path, _ = simulate_forward(lq_model, policy, make_batch(M=500))
    return path


def test_terminal_value_is_imposed(lq_model, lq_path, basis):
    sol = solve_bsde(lq_model, lq_path, basis)
    np.testing.assert_allclose(sol.y[:, -1], lq_model.terminal(lq_path.x[:, -1]).value)
    assert sol.y.shape == (lq_path.M, lq_path.n_steps + 1, 1)
    assert sol.gamma.shape == (lq_path.M, lq_path.n_steps, lq_model.Kq, 1)


@pytest.mark.parametrize("form", [EquationForm.Y_FORM, EquationForm.B_FORM])
def test_martingale_residuals_are_centred(lq_model, lq_path, basis, form):
    sol = solve_bsde(lq_model, lq_path, basis, form=form)
    mean, se = martingale_residuals(sol, lq_path.increments)
    assert np.all(np.abs(mean) <= 5.0 * se + 1e-12)


def test_replay_reproduces_the_solution(lq_model, lq_path, basis):
    sol = solve_bsde(lq_model, lq_path, basis)
    again = replay_bsde(lq_model, sol, lq_path)
    np.testing.assert_allclose(again.y, sol.y, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(again.z, sol.z, rtol=1e-8, atol=1e-10)
    partial = replay_bsde(lq_model, sol, lq_path, start=4)
    np.testing.assert_allclose(partial.y, sol.y, rtol=1e-8, atol=1e-10)


def test_replay_needs_rules(lq_model, lq_path, basis):
    sol = solve_bsde(lq_model, lq_path, basis, keep_rules=False)
    with pytest.raises(InvalidArgument):
        replay_bsde(lq_model, sol, lq_path)


def test_adjoint_starts_at_recursive_cost_gradient(lq_model, lq_path, basis):
    sol = solve_bsde(lq_model, lq_path, basis)
    ell = solve_ell(lq_model, lq_path, sol)
    _, grad = lq_model.recursive_cost(sol.y0)
    np.testing.assert_allclose(ell[:, 0], np.broadcast_to(-grad, (lq_path.M, 1)))
    assert np.all(np.isfinite(ell))


def _bspde_inputs(lq_model, lq_path, basis):
    projectors = build_projectors(lq_path, basis)
    eta = lq_path.x[:, -1].copy()
    decay = lq_model.space.decay(lq_path.grid.dt)
    return projectors, eta, decay


def test_non_contractive_costate_step_aborts(lq_model, lq_path, basis):
    projectors, eta, decay = _bspde_inputs(lq_model, lq_path, basis)
    coeffs = BspdeCoeffs(eta=eta, V=lambda k: 100.0 * np.eye(lq_model.N)[None])
    with pytest.raises(PicardError):
        solve_singular_bspde(coeffs, lq_path.increments, decay, projectors)


def test_trace_diagnostic(lq_model, lq_path, basis):
    projectors, eta, decay = _bspde_inputs(lq_model, lq_path, basis)
    coeffs = BspdeCoeffs(eta=eta, K=lambda k: np.stack([np.eye(lq_model.N)] * lq_model.n_W)[None])
    bare = solve_singular_bspde(coeffs, lq_path.increments, decay, projectors)
    with pytest.raises(InvalidArgument):
        trace_diagnostic(bare, T=1.0, theta=0.25)
    sol = solve_singular_bspde(coeffs, lq_path.increments, decay, projectors, trace_norms=True)
    assert sol.q1_trace.shape == (lq_path.M, lq_path.n_steps)
    diag = trace_diagnostic(sol, T=1.0, space=lq_model.space)
    assert np.isfinite(diag.statistic) and diag.statistic >= 0.0
    assert diag.reference > 0.0


def test_trace_diagnostic_is_stable_under_dim_h_doubling(jm, make_batch):
    batch = make_batch(M=800, seed=23)
    policy = PolicyParams.constant(0.2, n_knots=2, control_dim=1, d=1)
    basis = RegressionBasis(kind=RegressionKind.MODE_LINEAR)
    stats = []
    for dim in (16, 32):
        model = make_random_bounded_model(build_spectral_space(dim), 4, 1, jm, seed=7)
        hat = build_hat_ensemble(model, policy, batch, basis)
        costate = solve_costate(hat, trace_norms=True)
        stats.append(trace_diagnostic(costate.P, T=1.0, space=model.space).statistic)
    assert np.all(np.isfinite(stats)) and stats[0] > 0.0
    assert abs(stats[1] - stats[0]) <= 0.25 * stats[0], stats
