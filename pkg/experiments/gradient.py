"""
experiments/gradient.py
gradient-check: I(v) against finite-difference slopes on common random
numbers, the difference-scaling proxy, and consistency of the SMP gradient
with I(v) along random policy directions.
"""

import numpy as np

from experiments.common import RunContext, console, within
from tools.results import Stopwatch
from tools.smp import difference_scaling, random_direction, smp_consistency, variation_report


def run(ctx: RunContext) -> None:
    cfg, bundle = ctx.cfg, ctx.bundle
    var = cfg.variation
    hat = ctx.hat()
    rng = np.random.default_rng(ctx.seed)
    _, v = random_direction(hat, rng)

    console.rule("[bold cyan]First variation of the cost[/bold cyan]")
    with Stopwatch(bundle, "first_variation"):
        rep = variation_report(hat, v, var.eps)
    bundle.report("first_variation", rep)
    table = bundle.table("slopes", ["eps", "fd_slope", "fd_se", "I_v", "abs_error"])
    for eps in sorted(rep.fd_slopes, reverse=True):
        table.add(eps, rep.fd_slopes[eps], rep.fd_se[eps], rep.I_v, rep.errors[eps])
    ctx.show_table("slopes", f"Finite differences against I(v) = {rep.I_v:.6g} +- {rep.I_se:.2g}")
    ctx.verdict("variation_errors_decrease", rep.errors_decreasing,
                "|slope - I(v)| decreases as eps halves")
    ctx.verdict("variation_agreement", rep.agreement <= var.agreement,
                f"relative gap {rep.agreement:.2%} at eps = {min(var.eps)} (extrapolated {rep.extrapolated:.6g})")

    console.rule("[bold cyan]Perturbation scaling[/bold cyan]")
    with Stopwatch(bundle, "scaling"):
        sc = difference_scaling(hat, v, var.scaling_eps)
    table = bundle.table("scaling", ["eps", "sup_mean_sq_state_gap", "sup_mean_sq_density_gap"])
    for e, xs, rs in zip(sc.eps, sc.x_sup, sc.rho_sup):
        table.add(e, xs, rs)
    bundle.report("scaling", {"x_slope": sc.x_slope, "rho_slope": sc.rho_slope})
    ctx.show_table("scaling", "sup_t E|x^eps - x|^2 and density gap")
    ctx.verdict("state_gap_scaling", within(sc.x_slope, var.scaling_target, var.scaling_tolerance),
                f"log-log slope {sc.x_slope:.3f} (target {var.scaling_target} +- {var.scaling_tolerance})")

    console.rule("[bold cyan]SMP gradient consistency[/bold cyan]")
    with Stopwatch(bundle, "smp_consistency"):
        rows = smp_consistency(hat, var.directions, seed=ctx.seed, n_se=ctx.n_se)
    table = bundle.table("consistency", ["direction", "I_v", "grad_inner", "difference", "std_error", "passed"])
    for i, r in enumerate(rows):
        table.add(i, r.I_v, r.inner, r.difference, r.std_error, r.passed)
    ctx.show_table("consistency", "<gradient, delta> against I(v)")
    for i, r in enumerate(rows):
        ctx.verdict(f"smp_consistency_{i}", r.passed, f"difference {r.difference:.3e} +- {r.std_error:.2g}")
