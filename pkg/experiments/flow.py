"""
experiments/flow.py
verify-flow: composition of the stochastic flow of the linearized state on
aligned grids, and agreement of Phi(t, s) x with the direct simulation.
"""

import numpy as np

from experiments.common import RunContext, console
from tools.forward import HatLinearization, Measure, simulate_flow, simulate_forward, simulate_homogeneous
from tools.results import Stopwatch

FLOW_PATHS = 256


def run(ctx: RunContext) -> None:
    cfg, bundle, model = ctx.cfg, ctx.bundle, ctx.model
    batch = ctx.batch(M=min(cfg.ensemble.M, FLOW_PATHS))
    path, _ = simulate_forward(model, ctx.policy(), batch, measure=Measure.Q)
    lin = HatLinearization(model, path)
    n = path.n_steps
    s, t = 0, n // 2

    console.rule("[bold cyan]Stochastic flow[/bold cyan]")
    with Stopwatch(bundle, "flow"):
        phi_s = simulate_flow(model, path, s, lin, memory_cap=cfg.flow_memory)
        phi_t = simulate_flow(model, path, t, lin, memory_cap=cfg.flow_memory) if t > s else phi_s

    table = bundle.table("composition", ["r", "max_norm_gap"])
    worst = 0.0
    for r in range(t, n + 1):
        composed = phi_t.ops[:, r] @ phi_s.ops[:, t]
        gap = float(np.max(np.linalg.norm(composed - phi_s.ops[:, r], ord=2, axis=(1, 2))))
        worst = max(worst, gap)
        table.add(r, gap)
    bundle.report("composition_gap", worst)
    ctx.verdict("flow_composition", worst <= cfg.tolerances.flow_composition,
                f"max |Phi(r,t)Phi(t,s) - Phi(r,s)|_2 = {worst:.2e}")

    rng = np.random.default_rng(ctx.seed)
    x_s = rng.standard_normal(model.N)
    direct = simulate_homogeneous(model, path, x_s, s, lin).states
    via_flow = np.einsum("mkab,b->mka", phi_s.ops, x_s)
    rel = float(np.max(np.abs(via_flow - direct)) / max(float(np.max(np.abs(direct))), 1e-300))
    bundle.report("flow_replay_gap", rel)
    ctx.verdict("flow_replay", rel <= cfg.tolerances.flow_replay,
                f"relative gap to direct simulation {rel:.2e}")
    identity = float(np.max(np.abs(phi_s.ops[:, s] - np.eye(model.N))))
    ctx.verdict("flow_identity", identity == 0.0, f"|Phi(s,s) - I| = {identity:.1e}")
