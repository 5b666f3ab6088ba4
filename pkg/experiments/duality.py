"""
experiments/duality.py
verify-duality: direct duality of the costate with the forced first
variation, the truncation ladder, and the trace diagnostic under dim_h
doubling.
"""

import numpy as np
from rich.progress import Progress, SpinnerColumn, TextColumn

from experiments.common import RunContext, console
from tools.backward import trace_diagnostic
from tools.results import Stopwatch
from tools.smp import (duality_check_direct, duality_check_truncated, model_costate_coeffs,
                       random_direction, solve_costate)


def run(ctx: RunContext) -> None:
    cfg, bundle = ctx.cfg, ctx.bundle
    hat = ctx.hat()
    rng = np.random.default_rng(ctx.seed)
    _, v = random_direction(hat, rng)

    console.rule("[bold cyan]Direct duality[/bold cyan]")
    with Stopwatch(bundle, "direct_duality"):
        coeffs = model_costate_coeffs(hat)
        direct = duality_check_direct(hat, v=v, costate_coeffs=coeffs)
    bundle.report("direct_duality", direct)
    ctx.verdict("duality_direct", direct.passed,
                f"residual {direct.residual:.3e} +- {direct.std_error:.2g}")

    console.rule("[bold cyan]Truncation ladder[/bold cyan]")
    table = bundle.table("ladder", ["n", "lhs", "rhs", "residual", "std_error", "passed"])
    reports = []
    with Progress(SpinnerColumn(), TextColumn("{task.description}"), console=console) as progress:
        task = progress.add_task("truncated duality...", total=len(cfg.duality.ladder))
        for n in cfg.duality.ladder:
            progress.update(task, description=f"truncated duality n = m = {n}")
            with Stopwatch(bundle, "ladder"):
                rep = duality_check_truncated(hat, n, n, v=v, costate_coeffs=coeffs)
            reports.append(rep)
            table.add(n, rep.lhs, rep.rhs, rep.residual, rep.std_error, rep.passed)
            progress.advance(task)
    ctx.show_table("ladder", "Truncated duality residuals")
    for n, rep in zip(cfg.duality.ladder, reports):
        ctx.verdict(f"duality_truncated_n{n}", rep.passed,
                    f"residual {rep.residual:.3e} +- {rep.std_error:.2g}")
    trend = all(abs(b.residual) <= abs(a.residual) + ctx.n_se * max(a.std_error, b.std_error)
                for a, b in zip(reports, reports[1:]))
    ctx.verdict("duality_trend", trend, "|residual| non-increasing in n within noise")

    trace_doubling(ctx)


def trace_doubling(ctx: RunContext) -> None:
    """Weighted Q1 trace statistic for each configured dim_h."""
    cfg, bundle = ctx.cfg, ctx.bundle
    console.rule("[bold cyan]Trace diagnostic[/bold cyan]")
    table = bundle.table("trace", ["dim_h", "statistic", "std_error", "theta", "ratio"])
    stats = []
    base_batch = ctx.batch()
    for dim in cfg.duality.trace_dims:
        model = cfg.build_model(cfg.build_space(dim))
        hat = ctx.hat(model=model, batch=base_batch)
        with Stopwatch(bundle, "trace_diagnostic"):
            costate = solve_costate(hat, trace_norms=True)
            diag = trace_diagnostic(costate.P, cfg.discretization.T, space=model.space)
        stats.append(diag.statistic)
        table.add(dim, diag.statistic, diag.std_error, diag.theta, diag.ratio)
    ctx.show_table("trace", "E sum dt (T - t)^(2 theta) |Q1|_1^2")
    finite = bool(np.all(np.isfinite(stats)))
    ctx.verdict("trace_finite", finite, f"statistics {[f'{s:.4g}' for s in stats]}")
    if len(stats) > 1 and finite:
        change = max(abs(b - a) / max(abs(a), 1e-300) for a, b in zip(stats, stats[1:]))
        ctx.verdict("trace_dim_stability", change <= cfg.duality.trace_tolerance,
                    f"largest relative change {change:.1%} (limit {cfg.duality.trace_tolerance:.0%})")
