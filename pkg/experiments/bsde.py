"""
experiments/bsde.py
solve-bsde: reference BSDE with jumps on the configured policy, martingale
residuals of the discrete solution, and the forward adjoint.
"""

import numpy as np

from experiments.common import RunContext, console
from tools.backward import martingale_residuals, replay_bsde
from tools.girsanov import compute_cost
from tools.results import Stopwatch


def run(ctx: RunContext) -> None:
    bundle, model = ctx.bundle, ctx.model
    console.rule("[bold cyan]Controlled BSDE[/bold cyan]")
    hat = ctx.hat()
    sol, inc = hat.bsde, hat.path.increments

    mean, se = martingale_residuals(sol, inc)
    z = np.abs(mean) / np.maximum(se, 1e-300)
    table = bundle.table("residuals", ["step", "mean_residual", "std_error"])
    for k in range(mean.shape[0]):
        table.add(k, float(mean[k, 0]), float(se[k, 0]))
    bundle.report("bsde", {"y0": sol.y0, "form": sol.form, "M": hat.path.M,
                           "max_residual_z": float(z.max()), "ell_0": hat.ell[:, 0].mean(axis=0),
                           "ell_T": hat.ell[:, -1].mean(axis=0)})
    console.print(f"  y0 = {np.array2string(sol.y0, precision=6)}   "
                  f"E ell_T = {np.array2string(hat.ell[:, -1].mean(axis=0), precision=6)}")
    # Mean residuals are zero per step by the regression normal equations.
    ctx.verdict("bsde_martingale_residuals", bool(np.all(z <= ctx.n_se + 1.0)),
                f"max |mean|/SE = {z.max():.2f}")

    with Stopwatch(bundle, "replay"):
        again = replay_bsde(model, sol, hat.path)
    gap = float(np.max(np.abs(again.y - sol.y)))
    bundle.report("replay_gap", gap)
    ctx.verdict("bsde_replay", gap <= 1e-8 * (1.0 + float(np.max(np.abs(sol.y)))),
                f"max |y_replay - y| = {gap:.2e}")

    cost = compute_cost(model, hat.path, sol)
    bundle.report("cost", cost)
    console.print(f"  J = {cost.J_estimate:.6g} +- {cost.std_error:.2g}  components {cost.components}")
