import numpy as np
import pytest

from tools.backward import solve_bsde
from tools.errors import InvalidArgument
from tools.forward import Measure, simulate_forward
from tools.girsanov import (CostReport, MeasureForm, compute_cost, density_path, forms_agree,
                            log_weight_ratio)
from tools.policy import PolicyParams

N_SE = 4.0


@pytest.fixture
def policy():
    return PolicyParams.constant(0.5, n_knots=2, control_dim=1, d=1)


def test_density_is_a_martingale_under_the_reference_measure(lq_model, policy, make_batch):
    path, _ = simulate_forward(lq_model, policy, make_batch(M=2000, seed=3), measure=Measure.P)
    rho = density_path(lq_model, path)
    np.testing.assert_array_equal(rho.log_rho[:, 0], 0.0)
    mean, se = rho.martingale_check()
    assert abs(mean - 1.0) <= N_SE * se


def test_cost_forms_agree_across_measures(lq_model, policy, make_batch, basis):
    q_path, _ = simulate_forward(lq_model, policy, make_batch(M=2000, seed=4), measure=Measure.Q)
    p_path, _ = simulate_forward(lq_model, policy, make_batch(M=2000, seed=5), measure=Measure.P)
    q_cost = compute_cost(lq_model, q_path, solve_bsde(lq_model, q_path, basis))
    p_cost = compute_cost(lq_model, p_path, solve_bsde(lq_model, p_path, basis),
                          MeasureForm.P_FORM, rho=density_path(lq_model, p_path))
    diff = q_cost.per_path.mean() - p_cost.per_path.mean()
    assert abs(diff) <= N_SE * np.hypot(q_cost.std_error, p_cost.std_error)
    assert set(q_cost.components) == {"running", "terminal", "recursive"}


def test_p_form_needs_the_density(lq_model, policy, make_batch, basis):
    path, _ = simulate_forward(lq_model, policy, make_batch(M=200), measure=Measure.P)
    with pytest.raises(InvalidArgument):
        compute_cost(lq_model, path, solve_bsde(lq_model, path, basis), MeasureForm.P_FORM)


def test_weight_ratio_needs_shared_observations(lq_model, policy, make_batch):
    a, _ = simulate_forward(lq_model, policy, make_batch(M=10, seed=1))
    b, _ = simulate_forward(lq_model, policy, make_batch(M=10, seed=2))
    with pytest.raises(InvalidArgument):
        log_weight_ratio(a, b)
    np.testing.assert_array_equal(log_weight_ratio(a, a), 0.0)


def test_weight_ratio_of_shifted_control(rb_model, policy, make_batch):
    ref, _ = simulate_forward(rb_model, policy, make_batch(M=10))
    inc = ref.increments
    other, _ = simulate_forward(rb_model, None, ref.noise, controls=ref.u - 0.2,
                                observation=inc.dY, obs_drift=inc.obs_drift)
    ratio = log_weight_ratio(other, ref)
    expected = (density_path(rb_model, other).log_rho - density_path(rb_model, ref).log_rho)
    np.testing.assert_allclose(ratio, expected, atol=1e-12)


def test_forms_agree_arithmetic():
    q = CostReport(J_estimate=1.0, std_error=0.3)
    p = CostReport(J_estimate=2.0, std_error=0.4)
    diff, se, ok = forms_agree(q, p, n_se=3.0)
    assert diff == pytest.approx(-1.0)
    assert se == pytest.approx(0.5)
    assert ok
    assert not forms_agree(q, p, n_se=1.0)[2]
