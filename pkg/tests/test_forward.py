import numpy as np
import pytest

from tools.errors import BudgetExceeded, InvalidArgument, ShapeError
from tools.forward import (HatLinearization, Measure, moment_profile, simulate_first_variation,
                           simulate_flow, simulate_forward, simulate_homogeneous)
from tools.policy import PolicyParams


@pytest.fixture
def policy():
    return PolicyParams.constant(0.5, n_knots=2, control_dim=1, d=1)


def test_shapes_and_initial_values(lq_model, policy, make_batch):
    batch = make_batch(M=20)
    path, Y = simulate_forward(lq_model, policy, batch)
    n, N = batch.grid.n_steps, lq_model.N
    assert path.x.shape == (20, n + 1, N)
    assert path.u.shape == (20, n, 1)
    assert path.phi.shape == (20, n, 2)
    np.testing.assert_array_equal(path.x[:, 0], np.broadcast_to(lq_model.x0, (20, N)))
    np.testing.assert_array_equal(Y[:, 0], 0.0)
    np.testing.assert_allclose(path.u, 0.5)


def test_observation_increments_under_each_measure(rb_model, policy, make_batch):
    batch = make_batch(M=30)
    q_path, Y = simulate_forward(rb_model, policy, batch, measure=Measure.Q)
    inc = q_path.increments
    np.testing.assert_allclose(inc.dY, inc.h * inc.dt + batch.dB, atol=1e-15)
    np.testing.assert_allclose(np.diff(Y, axis=1), inc.dY, atol=1e-14)
    np.testing.assert_allclose(np.diff(q_path.qv, axis=1), inc.dY ** 2, atol=1e-14)
    p_path, _ = simulate_forward(rb_model, policy, batch, measure=Measure.P)
    np.testing.assert_array_equal(p_path.increments.dY, batch.dB)
    np.testing.assert_array_equal(p_path.increments.obs_drift, 0.0)


def test_restart_reproduces_the_base_path(rb_model, policy, make_batch):
    batch = make_batch(M=15)
    base, _ = simulate_forward(rb_model, policy, batch)
    again, _ = simulate_forward(rb_model, policy, batch, restart=(base, 3))
    np.testing.assert_allclose(again.x, base.x, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(again.Y, base.Y, rtol=1e-13, atol=1e-15)


def test_noise_bump_is_adapted(rb_model, policy, make_batch):
    batch = make_batch(M=15)
    base, _ = simulate_forward(rb_model, policy, batch)
    bumped, _ = simulate_forward(rb_model, policy, batch.bump_W(4, 0, 0.1))
    np.testing.assert_array_equal(bumped.x[:, :5], base.x[:, :5])
    assert np.max(np.abs(bumped.x[:, 5] - base.x[:, 5])) > 0.0


def test_mismatched_batch_and_missing_policy(lq_model, policy, make_batch):
    with pytest.raises(ShapeError):
        simulate_forward(lq_model, policy, make_batch(M=5, n_W=3))
    with pytest.raises(InvalidArgument):
        simulate_forward(lq_model, None, make_batch(M=5))
    with pytest.raises(ShapeError):
        simulate_forward(lq_model, None, make_batch(M=5), controls=np.zeros((5, 2, 1)))


def test_explicit_controls_leave_no_features(lq_model, make_batch, grid):
    batch = make_batch(M=5)
    path, _ = simulate_forward(lq_model, None, batch, controls=np.full((5, grid.n_steps, 1), 0.2))
    assert path.phi is None
    np.testing.assert_allclose(path.u, 0.2)


def _fd_states(model, hat, v, eps):
    inc = hat.increments
    out = []
    for sign in (1.0, -1.0):
        p, _ = simulate_forward(model, None, hat.noise, controls=hat.u + sign * eps * v,
                                observation=inc.dY, obs_drift=inc.obs_drift)
        out.append(p.x)
    return (out[0] - out[1]) / (2.0 * eps)


def test_first_variation_is_the_scheme_derivative(rb_model, policy, make_batch, rng):
    hat, _ = simulate_forward(rb_model, policy, make_batch(M=25))
    v = 0.3 * rng.standard_normal(hat.u.shape)
    x1 = simulate_first_variation(rb_model, hat, v).states
    fd = _fd_states(rb_model, hat, v, 1e-5)
    scale = np.max(np.abs(x1))
    assert scale > 0.0
    np.testing.assert_allclose(fd, x1, atol=1e-6 * scale)
    np.testing.assert_array_equal(x1[:, 0], 0.0)


def test_first_variation_is_linear(rb_model, policy, make_batch, rng):
    hat, _ = simulate_forward(rb_model, policy, make_batch(M=10))
    lin = HatLinearization(rb_model, hat)
    v = rng.standard_normal(hat.u.shape)
    once = simulate_first_variation(rb_model, hat, v, lin).states
    twice = simulate_first_variation(rb_model, hat, 2.0 * v, lin).states
    np.testing.assert_allclose(twice, 2.0 * once, rtol=1e-12, atol=1e-14)
    with pytest.raises(ShapeError):
        simulate_first_variation(rb_model, hat, v[:, :-1], lin)


def test_flow_starts_at_identity_and_composes(rb_model, policy, make_batch):
    hat, _ = simulate_forward(rb_model, policy, make_batch(M=12))
    lin = HatLinearization(rb_model, hat)
    n = hat.n_steps
    early = simulate_flow(rb_model, hat, 1, lin)
    late = simulate_flow(rb_model, hat, 4, lin)
    assert early.ops.shape == (12, n + 1, rb_model.N, rb_model.N)
    np.testing.assert_array_equal(early.ops[:, 1], np.broadcast_to(np.eye(rb_model.N), (12, 6, 6)))
    np.testing.assert_array_equal(early.ops[:, 0], 0.0)
    composed = late.ops[:, n] @ early.ops[:, 4]
    np.testing.assert_allclose(composed, early.ops[:, n], rtol=1e-9, atol=1e-12)


def test_flow_applies_like_the_homogeneous_equation(rb_model, policy, make_batch, rng):
    hat, _ = simulate_forward(rb_model, policy, make_batch(M=12))
    lin = HatLinearization(rb_model, hat)
    x_s = rng.standard_normal((12, rb_model.N))
    flow = simulate_flow(rb_model, hat, 2, lin)
    direct = simulate_homogeneous(rb_model, hat, x_s, 2, lin).states
    for k in range(2, hat.n_steps + 1):
        np.testing.assert_allclose(flow.apply(k, x_s), direct[:, k], rtol=1e-10, atol=1e-12)


def test_flow_memory_cap(rb_model, policy, make_batch):
    hat, _ = simulate_forward(rb_model, policy, make_batch(M=4))
    with pytest.raises(BudgetExceeded):
        simulate_flow(rb_model, hat, 0, memory_cap=1)


def test_moment_profile_halves_the_step(lq_model, policy, grid):
    rows = moment_profile(lq_model, policy, grid, M=100, seed=3, levels=2)
    assert [r.n_steps for r in rows] == [8, 16]
    assert all(np.isfinite(r.sup_second_moment) and r.sup_second_moment > 0 for r in rows)
