"""
experiments/simulate.py
simulate: forward ensemble under both measures, density martingale check,
two-measure cost comparison and trajectory summaries. --diagnostics adds
the semigroup smoothing fit, the jet derivative check and a dt-halving
moment profile.
"""

import numpy as np

from experiments.common import P_ENSEMBLE_OFFSET, RunContext, console, within
from tools.backward import solve_bsde
from tools.forward import Measure, moment_profile, simulate_forward
from tools.girsanov import MeasureForm, compute_cost, density_path, forms_agree
from tools.models import check_bounds, check_derivatives
from tools.results import Stopwatch
from tools.spectral import BasisKind, build_spectral_space, fit_smoothing_exponent

DERIVATIVE_TOL = 1e-5
FIT_DIM = 64


def run(ctx: RunContext) -> None:
    cfg, bundle, model = ctx.cfg, ctx.bundle, ctx.model
    policy = ctx.policy()
    basis = cfg.build_basis()

    console.rule("[bold cyan]Forward ensembles[/bold cyan]")
    with Stopwatch(bundle, "simulate"):
        q_batch = ctx.batch()
        q_path, _ = simulate_forward(model, policy, q_batch, measure=Measure.Q)
        p_batch = ctx.batch(seed_offset=P_ENSEMBLE_OFFSET)
        p_path, _ = simulate_forward(model, policy, p_batch, measure=Measure.P)
    rho = density_path(model, p_path)

    mean, se = rho.martingale_check()
    bundle.report("density", {"mean_rho_T": mean, "std_error": se, "M": p_path.M})
    ctx.verdict("density_martingale", abs(mean - 1.0) <= ctx.n_se * se + 1e-12,
                f"E rho_T = {mean:.5f} +- {se:.2g}")

    console.rule("[bold cyan]Cost in both measure forms[/bold cyan]")
    with Stopwatch(bundle, "costs"):
        q_cost = compute_cost(model, q_path, solve_bsde(model, q_path, basis, keep_rules=False),
                              MeasureForm.Q_FORM)
        p_cost = compute_cost(model, p_path, solve_bsde(model, p_path, basis, keep_rules=False),
                              MeasureForm.P_FORM, rho=rho)
    diff, comb_se, ok = forms_agree(q_cost, p_cost, ctx.n_se)
    bundle.report("cost_Q_form", q_cost)
    bundle.report("cost_P_form", p_cost)
    console.print(f"  Q_form J = {q_cost.J_estimate:.6g} +- {q_cost.std_error:.2g}   "
                  f"P_form J = {p_cost.J_estimate:.6g} +- {p_cost.std_error:.2g}")
    ctx.verdict("measure_forms_agree", ok, f"difference {diff:.3g}, combined SE {comb_se:.2g}")

    traj = bundle.table("trajectory", ["t"] + [f"mean_x{i}" for i in range(model.N)]
                        + ["mean_sq_norm", "mean_Y0", "mean_rho"])
    times = q_path.grid.times
    x_mean = q_path.x.mean(axis=0)
    sq = np.sum(q_path.x ** 2, axis=2).mean(axis=0)
    y_mean = q_path.Y[:, :, 0].mean(axis=0)
    r_mean = rho.rho.mean(axis=0)
    for k, t in enumerate(times):
        traj.add(float(t), *[float(v) for v in x_mean[k]], float(sq[k]), float(y_mean[k]), float(r_mean[k]))
    bounds = check_bounds(model)
    bundle.report("coefficient_bounds", bounds)
    ctx.verdict("observation_bounded", bounds["h_sup"] <= bounds["h_bound"],
                f"sup|h| = {bounds['h_sup']:.3g} <= {bounds['h_bound']:.3g}")

    if ctx.options.get("diagnostics"):
        diagnostics(ctx, policy)


def diagnostics(ctx: RunContext, policy) -> None:
    cfg, bundle, model = ctx.cfg, ctx.bundle, ctx.model
    console.rule("[bold cyan]Diagnostics[/bold cyan]")
    disc = cfg.discretization
    fit_space = build_spectral_space(FIT_DIM, disc.domain_length, BasisKind.NEUMANN_COSINE,
                                     diffusivity=model.space.diffusivity)
    C, theta = fit_smoothing_exponent(fit_space)
    bundle.report("semigroup_fit", {"C": C, "theta": theta, "dim_h": FIT_DIM})
    tol = cfg.tolerances
    ctx.verdict("semigroup_smoothing", within(theta, tol.smoothing_target, tol.smoothing_tolerance),
                f"theta = {theta:.4f} (target {tol.smoothing_target} +- {tol.smoothing_tolerance})")

    errors = check_derivatives(model, seed=ctx.seed)
    bundle.report("derivative_check", errors)
    worst = max(errors, key=errors.get)
    ctx.verdict("jet_derivatives", errors[worst] <= DERIVATIVE_TOL,
                f"worst {worst}: {errors[worst]:.2e}")

    with Stopwatch(bundle, "moment_profile"):
        rows = moment_profile(model, policy, cfg.build_grid(), min(cfg.ensemble.M, 1024), ctx.seed)
    table = bundle.table("moments", ["n_steps", "sup_mean_sq_norm", "std_error"])
    for r in rows:
        table.add(r.n_steps, r.sup_second_moment, r.std_error)
    ctx.show_table("moments", "sup_k E|x_k|^2 under dt halving")
