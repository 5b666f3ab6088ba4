"""
experiments/optimize.py
optimize: projected gradient descent on the policy parameters driven by the
SMP gradient, the box-face variational inequality at the result, and the
optimality certificate (direct and Malliavin stationarity at an
independently computed optimum, with a perturbed-policy negative control).
"""

import numpy as np

from experiments.common import RunContext, console
from tools.errors import StepSizeCollapse
from tools.malliavin import assemble_malliavin_smp, malliavin_stationarity
from tools.policy import PolicyParams
from tools.results import Stopwatch
from tools.smp import (CommonNoiseCost, IterationRecord, OptimizationResult, SmpGradient, box_face_check,
                       build_adjoint_bundle, newton_reference_optimum, optimize_policy, smp_gradient)

ITERATION_HEADER = ["iteration", "J", "std_error", "grad_norm", "step", "accepted"]


def run(ctx: RunContext) -> None:
    result = run_optimizer(ctx)
    face_check(ctx, result)
    certificate(ctx)


def run_optimizer(ctx: RunContext) -> OptimizationResult:
    cfg, bundle, model = ctx.cfg, ctx.bundle, ctx.model
    console.rule("[bold cyan]Policy optimization[/bold cyan]")
    table = bundle.table("optimizer", ITERATION_HEADER)

    def on_iteration(rec: IterationRecord) -> None:
        table.add(*rec.row())
        flag = "[green]accepted[/green]" if rec.accepted else "[red]rejected[/red]"
        console.print(f"  it {rec.iteration:3d}  J = {rec.J:.6g} +- {rec.std_error:.2g}  "
                      f"|G| = {rec.grad_norm:.3g}  step {rec.step:.3g}  {flag}")

    try:
        with Stopwatch(bundle, "optimize"):
            result = optimize_policy(model, ctx.policy(), ctx.batch(), cfg.build_basis(),
                                     cfg.optimizer_options(), on_iteration)
    except StepSizeCollapse as e:
        bundle.report("optimizer", {"status": "step_size_collapse", "step_size": e.step_size,
                                    "iterations": len(getattr(e, "history", []))})
        raise
    bundle.report("optimizer", {"status": result.status, "iterations": len(result.history),
                                "final_cost": result.cost, "theta": result.policy.theta,
                                "initial_grad_norm": result.initial_grad_norm,
                                "final_grad_norm": result.gradient.norm,
                                "reduction": result.reduction})
    bundle.report("final_gradient", result.gradient.table())
    console.print(f"  status {result.status}: J = {result.cost.J_estimate:.6g}, |G| reduced "
                  f"{result.reduction:.3g}x")
    return result


def face_check(ctx: RunContext, result: OptimizationResult) -> None:
    bundle = ctx.bundle
    hat = ctx.hat(policy=result.policy)
    rows = box_face_check(result.gradient, hat, ctx.n_se)
    table = bundle.table("box_faces", ["knot", "control", "face", "value", "std_error", "passed"])
    for r in rows:
        table.add(r.knot, r.control, r.face, r.value, r.std_error, r.passed)
    ctx.verdict("box_faces", all(r.passed for r in rows),
                f"{sum(r.passed for r in rows)}/{len(rows)} faces with E(v - u).bracket >= -{ctx.n_se} SE",
                gated=result.status != "max_iters")


def stationarity_pair(ctx: RunContext, policy: PolicyParams, label: str) -> tuple[SmpGradient, SmpGradient]:
    """Direct and Malliavin stationarity brackets at `policy`."""
    cfg, model = ctx.cfg, ctx.model
    mal = cfg.malliavin
    direct = smp_gradient(build_adjoint_bundle(model, policy, ctx.batch(), cfg.build_basis()))
    hat = ctx.hat(policy=policy, M=mal.paths)
    with Stopwatch(ctx.bundle, "malliavin_assembly"):
        assembled = assemble_malliavin_smp(hat, stride=mal.stride, bump_scale=mal.bump, budget=mal.budget,
                                           threads=ctx.threads, flow_memory=cfg.flow_memory)
    ctx.bundle.report(f"malliavin_assembly_{label}",
                      {"replays": assembled.replays, "eval_steps": assembled.eval_steps,
                       "recursion_flow_gap": assembled.identity_defect,
                       "construction_defect": assembled.construction_defect(hat.dt)})
    return direct, malliavin_stationarity(assembled, hat)


def certificate(ctx: RunContext) -> None:
    cfg, bundle, model = ctx.cfg, ctx.bundle, ctx.model
    console.rule("[bold cyan]Optimality certificate[/bold cyan]")
    policy0 = ctx.policy()
    cost = CommonNoiseCost(model, policy0, ctx.batch(), cfg.build_basis())
    with Stopwatch(bundle, "reference_optimum"):
        ref = newton_reference_optimum(cost, policy0.theta)
    star = policy0.with_theta(ref.theta)
    bundle.report("reference_optimum", {"theta": ref.theta, "J": ref.J, "iterations": ref.iterations,
                                        "cost_evaluations": cost.evaluations})

    table = bundle.table("certificate", ["policy", "route", "norm", "max_z"])
    direct, mall = stationarity_pair(ctx, star, "optimum")
    for g in (direct, mall):
        table.add("optimum", g.route, g.norm, float(g.z_scores.max()))
        ctx.verdict(f"stationary_at_optimum_{g.route}", g.is_stationary(ctx.n_se),
                    f"max z = {g.z_scores.max():.2f}")

    perturbed = star.with_theta(star.theta + cfg.malliavin.perturbation)
    direct_p, mall_p = stationarity_pair(ctx, perturbed, "perturbed")
    limit = cfg.malliavin.negative_control_se
    for g in (direct_p, mall_p):
        table.add("perturbed", g.route, g.norm, float(g.z_scores.max()))
        ctx.verdict(f"nonstationary_when_perturbed_{g.route}", bool(g.z_scores.max() > limit),
                    f"max z = {g.z_scores.max():.2f} (needs > {limit})")
    ctx.show_table("certificate", "Stationarity brackets")
    gap = np.abs(direct.values - mall.values) / np.sqrt(direct.std_error ** 2 + mall.std_error ** 2 + 1e-300)
    bundle.report("route_agreement_z", float(gap.max()))
