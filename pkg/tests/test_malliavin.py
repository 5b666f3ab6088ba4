import numpy as np
import pytest

from tools.errors import BudgetExceeded, InvalidArgument
from tools.malliavin import (ForwardFunctional, PathFunctional, SlotPlan, adaptedness_defect,
                             assemble_malliavin_smp, chain_rule_defect, gaussian_duality,
                             malliavin_B, malliavin_N, malliavin_stationarity, malliavin_W,
                             plan_slots, planned_replays, poisson_duality)
from tools.models import make_random_bounded_model
from tools.noise import JumpMeasureSpec, TimeGrid, sample_batch
from tools.policy import PolicyParams
from tools.smp import AdjointBundle, build_hat_ensemble, smp_gradient, solve_costate
from tools.spectral import build_spectral_space

N_SE = 4.0


@pytest.fixture
def policy():
    return PolicyParams.constant(0.3, n_knots=2, control_dim=1, d=1)


def test_derivative_of_a_linear_functional(make_batch):
    batch = make_batch(M=6)
    fn = PathFunctional(lambda noise: 3.0 * noise.dW[..., 2, 1] - noise.dB[..., 5, 0])
    np.testing.assert_allclose(malliavin_W(fn, batch, 2, 1), 3.0, rtol=1e-8)
    np.testing.assert_allclose(malliavin_W(fn, batch, 3, 1), 0.0, atol=1e-8)
    np.testing.assert_allclose(malliavin_B(fn, batch, 5, 0), -1.0, rtol=1e-8)
    single = malliavin_W(fn, batch.path(0), 2, 1)
    assert np.ndim(single) == 0 and single == pytest.approx(3.0)
    with pytest.raises(InvalidArgument):
        malliavin_W(fn, batch, batch.grid.n_steps, 0)


def test_jump_derivative_of_the_count(make_batch):
    batch = make_batch(M=6)
    count = PathFunctional(lambda noise: noise.counts.sum(axis=(1, 2)))
    np.testing.assert_array_equal(malliavin_N(count, batch, 0.4, 1), 1.0)
    with pytest.raises(InvalidArgument):
        malliavin_N(count, batch, 0.0, 1)
    with pytest.raises(InvalidArgument):
        malliavin_N(count, batch, 1.5, 1)


def test_forward_functional_on_a_single_path(rb_model, policy, make_batch):
    batch = make_batch(M=3)
    F = ForwardFunctional(rb_model, policy, lambda x: x[:, 0])
    value = F(batch.path(1))
    assert np.ndim(value) == 0
    assert value == pytest.approx(F(batch)[1], rel=1e-12)


def test_adapted_states_ignore_later_noise(rb_model, policy, make_batch):
    assert adaptedness_defect(rb_model, policy, make_batch(M=20), step=3) == 0.0


def test_chain_rule(rb_model, policy, make_batch):
    defect = chain_rule_defect(rb_model, policy, make_batch(M=20),
                               lambda x: np.sum(x ** 2, axis=1), lambda x: 2.0 * x, step=2, mode=0)
    assert defect < 1e-5


def test_gaussian_integration_by_parts(rb_model, policy, make_batch):
    batch = make_batch(M=1500, seed=31)
    F = ForwardFunctional(rb_model, policy, lambda x: np.tanh(x[:, 0]))
    W_before = np.cumsum(batch.dW, axis=1) - batch.dW
    check = gaussian_duality(F, batch, np.cos(W_before), stream="W", n_se=N_SE)
    assert check.passed, check.to_dict()
    b_weight = np.full(batch.dB.shape, 0.5)
    assert gaussian_duality(F, batch, b_weight, stream="B", n_se=N_SE).passed


def test_poisson_integration_by_parts(rb_model, policy, make_batch):
    batch = make_batch(M=1500, seed=32)
    F = ForwardFunctional(rb_model, policy, lambda x: np.tanh(x[:, 0]))
    counts_before = np.cumsum(batch.counts, axis=1) - batch.counts
    psi = 1.0 / (1.0 + counts_before)
    check = poisson_duality(F, batch, psi, n_se=N_SE)
    assert check.passed, check.to_dict()


def test_harvesting_has_no_control_side_slots(harvesting_model, make_batch, basis):
    policy = PolicyParams.constant(0.5, n_knots=2, control_dim=1, d=1)
    hat = build_hat_ensemble(harvesting_model, policy, make_batch(M=400), basis)
    _, u_side = plan_slots(hat)
    assert u_side.size == 0


def test_planned_replay_count():
    one_mode = SlotPlan(w_modes=(0,), b_comps=(), marks=())
    assert one_mode.size == 2
    assert planned_replays(4, [0, 2], one_mode, one_mode) == 28


@pytest.fixture
def tiny_hat(basis):
    space = build_spectral_space(3)
    jm = JumpMeasureSpec(marks=(0.2,), weights=(1.0,))
    model = make_random_bounded_model(space, 2, 1, jm, seed=3)
    batch = sample_batch(TimeGrid(T=1.0, n_steps=4), 2, 1, jm, seed=5, M=160)
    return build_hat_ensemble(model, PolicyParams.constant(0.2, n_knots=2, control_dim=1, d=1),
                              batch, basis)


def test_assembly_budget(tiny_hat):
    with pytest.raises(BudgetExceeded):
        assemble_malliavin_smp(tiny_hat, budget=1)


def test_assembly_identities(tiny_hat):
    bundle = assemble_malliavin_smp(tiny_hat)
    n = tiny_hat.path.n_steps
    assert bundle.eval_steps == list(range(n))
    assert bundle.grad_H.shape == (tiny_hat.path.M, n, tiny_hat.model.N)
    assert bundle.construction_defect(tiny_hat.dt) < 1e-10
    scale = 1.0 + max(float(np.max(np.abs(m))) for m in bundle.M.values())
    assert bundle.identity_defect < 1e-8 * scale
    x_side, u_side = plan_slots(tiny_hat)
    assert 0 < bundle.replays <= planned_replays(n, bundle.eval_steps, x_side, u_side)
    np.testing.assert_allclose(bundle.weights, tiny_hat.dt)


def test_assembly_is_thread_count_invariant(tiny_hat):
    serial = assemble_malliavin_smp(tiny_hat, stride=2, threads=1)
    parallel = assemble_malliavin_smp(tiny_hat, stride=2, threads=2)
    np.testing.assert_allclose(parallel.bracket, serial.bracket, rtol=1e-12, atol=1e-14)
    assert serial.eval_steps == [0, 2]
    np.testing.assert_allclose(serial.weights, [0.5, 0.0, 0.5, 0.0])


@pytest.mark.slow
def test_malliavin_and_direct_gradients_agree(basis):
    space = build_spectral_space(3)
    jm = JumpMeasureSpec(marks=(0.2,), weights=(1.0,))
    model = make_random_bounded_model(space, 2, 1, jm, seed=3)
    batch = sample_batch(TimeGrid(T=1.0, n_steps=4), 2, 1, jm, seed=6, M=2000)
    hat = build_hat_ensemble(model, PolicyParams.constant(0.2, n_knots=2, control_dim=1, d=1),
                             batch, basis)
    malliavin = malliavin_stationarity(assemble_malliavin_smp(hat, threads=2), hat)
    direct = smp_gradient(AdjointBundle(hat=hat, costate=solve_costate(hat)))
    diff = malliavin.per_path - direct.per_path
    se = diff.std(axis=0, ddof=1) / np.sqrt(diff.shape[0])
    gap = np.abs(diff.mean(axis=0))
    assert np.all(gap <= N_SE * se + 0.05 * direct.norm)
