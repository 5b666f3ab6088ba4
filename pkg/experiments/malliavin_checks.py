"""
experiments/malliavin_checks.py
verify-malliavin: Gaussian (W and B) and Poisson integration-by-parts
identities for a smooth functional of x_T, adaptedness of the state, and
the chain rule for a bumped functional.
"""

import numpy as np

from experiments.common import RunContext, console
from tools.forward import Measure, simulate_forward
from tools.malliavin import (ForwardFunctional, adaptedness_defect, chain_rule_defect,
                             gaussian_duality, poisson_duality)
from tools.results import Stopwatch

CHAIN_RULE_TOL = 1e-5


def log_energy(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.sum(x ** 2, axis=-1))


def log_energy_grad(x: np.ndarray) -> np.ndarray:
    return 2.0 * x / (1.0 + np.sum(x ** 2, axis=-1, keepdims=True))


def run(ctx: RunContext) -> None:
    cfg, bundle, model = ctx.cfg, ctx.bundle, ctx.model
    policy = ctx.policy()
    batch = ctx.batch(M=cfg.malliavin.paths)
    base, _ = simulate_forward(model, policy, batch, measure=Measure.Q)
    F = ForwardFunctional(model, policy, log_energy, name="log(1+|x_T|^2)")
    n = base.n_steps

    console.rule("[bold cyan]Integration by parts[/bold cyan]")
    table = bundle.table("ibp", ["identity", "lhs", "rhs", "residual", "std_error", "passed"])
    x = base.x[:, :-1]
    w_weight = 0.5 * np.tanh(x[:, :, np.arange(model.n_W) % model.N])
    b_weight = 0.5 * np.tanh(base.Y[:, :-1])
    checks = []
    with Stopwatch(bundle, "gaussian_duality"):
        checks.append(gaussian_duality(F, batch, w_weight, "W", cfg.malliavin.bump, ctx.n_se))
        checks.append(gaussian_duality(F, batch, b_weight, "B", cfg.malliavin.bump, ctx.n_se))
    if model.K:
        psi = np.repeat(0.5 * (1.0 + np.tanh(x[:, :, :1])), model.K, axis=2)
        with Stopwatch(bundle, "poisson_duality"):
            checks.append(poisson_duality(F, batch, psi, ctx.n_se))
    for c in checks:
        table.add(c.identity, c.lhs, c.rhs, c.residual, c.std_error, c.passed)
    ctx.show_table("ibp", "Malliavin dualities")
    for c in checks:
        ctx.verdict(f"malliavin_duality_{c.identity}", c.passed,
                    f"residual {c.residual:.3e} +- {c.std_error:.2g}")

    console.rule("[bold cyan]Adaptedness and chain rule[/bold cyan]")
    sub = batch.subset(slice(0, min(batch.M, 64)))
    steps = sorted({0, n // 2, n - 1})
    worst = max(adaptedness_defect(model, policy, sub, k) for k in steps)
    bundle.report("adaptedness_defect", worst)
    ctx.verdict("malliavin_adapted", worst <= cfg.malliavin.adapted_tolerance,
                f"max |D_k x_j|, j <= k: {worst:.1e}")

    gap = max(chain_rule_defect(model, policy, sub, log_energy, log_energy_grad, k, 0) for k in steps)
    bundle.report("chain_rule_defect", gap)
    ctx.verdict("malliavin_chain_rule", gap <= CHAIN_RULE_TOL, f"relative gap {gap:.2e}")
