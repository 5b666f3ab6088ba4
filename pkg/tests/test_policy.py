import numpy as np
import pytest

from tools.errors import InvalidArgument
from tools.policy import (PolicyEvaluator, PolicyFeatures, PolicyParams, direction_from_theta,
                          evaluate_policy, project_theta)


def test_feature_counts_and_shapes():
    pp = PolicyParams.constant(0.5, n_knots=4, control_dim=1, d=2, features="affine_y_qv")
    assert pp.theta.shape == (4, 1, 5)
    assert PolicyFeatures.CONSTANT.count(3) == 1
    assert PolicyFeatures.AFFINE_Y.count(3) == 4


def test_knots_partition_the_grid():
    pp = PolicyParams.constant(0.0, n_knots=4, control_dim=1, d=1)
    assert [pp.knot_of_step(k, 8) for k in range(8)] == [0, 0, 1, 1, 2, 2, 3, 3]
    np.testing.assert_array_equal(pp.knot_steps(2, 8), [4, 5])
    assert pp.knot_of_time(1.0) == 3


def test_controls_are_clipped_to_the_box():
    pp = PolicyParams.constant(10.0, n_knots=2, control_dim=1, d=1)
    np.testing.assert_array_equal(evaluate_policy(pp, 0.5, np.zeros((3, 1)), -1.0, 1.0), [1.0])


def test_time_outside_horizon_is_rejected():
    pp = PolicyParams.constant(0.0, n_knots=2, control_dim=1, d=1)
    with pytest.raises(InvalidArgument):
        evaluate_policy(pp, 1.5, np.zeros((2, 1)), -1.0, 1.0)


def test_evaluator_matches_prefix_evaluation(rng):
    n_steps, d = 8, 2
    pp = PolicyParams(theta=rng.standard_normal((4, 1, 5)), features="affine_y_qv")
    ev = PolicyEvaluator(pp, [-1.0], [1.0], n_steps=n_steps, dt=1.0 / n_steps)
    prefix = rng.standard_normal((6, d)) * 0.3
    qv = np.sum(np.diff(prefix, axis=0) ** 2, axis=0)
    k = prefix.shape[0] - 1
    step = ev.step(k, prefix[-1:], qv[None])
    np.testing.assert_allclose(step.u[0], evaluate_policy(pp, k / n_steps, prefix, -1.0, 1.0))


def test_active_mask_and_direction():
    theta = np.zeros((1, 1, 2))
    theta[0, 0] = [0.0, 1.0]
    pp = PolicyParams(theta=theta, features="affine_y")
    ev = PolicyEvaluator(pp, [-1.0], [1.0], n_steps=1, dt=1.0)
    step = ev.step(0, np.array([[0.5], [3.0]]), np.zeros((2, 1)))
    np.testing.assert_array_equal(step.u[:, 0], [0.5, 1.0])
    np.testing.assert_array_equal(step.active[:, 0], [True, False])
    v = direction_from_theta(pp, np.ones(2), step.phi[:, None, :], step.active[:, None, :])
    np.testing.assert_allclose(v[:, 0, 0], [1.5, 0.0])


def test_projection_clips_intercepts_only():
    pp = PolicyParams.constant(0.0, n_knots=2, control_dim=1, d=1)
    theta = np.array([[[5.0, 7.0]], [[-5.0, -7.0]]])
    out = project_theta(pp, theta, -1.0, 1.0)
    np.testing.assert_array_equal(out[:, 0, 0], [1.0, -1.0])
    np.testing.assert_array_equal(out[:, 0, 1], [7.0, -7.0])
