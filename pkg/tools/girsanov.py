"""
tools/girsanov.py
Density of the observation measure, its first variation, and the cost
functional in both measure forms.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from tools.errors import InvalidArgument, ShapeError
from tools.forward import ForwardPath, HatLinearization
from tools.models import ModelSpec

logger = logging.getLogger(__name__)


@dataclass
class DensityPath:
    log_rho: np.ndarray         # (M, n+1), log_rho[:, 0] = 0

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.log_rho)

    @property
    def terminal(self) -> np.ndarray:
        return np.exp(self.log_rho[:, -1])

    def martingale_check(self) -> tuple[float, float]:
        """(mean, standard error) of rho_T."""
        rT = self.terminal
        return float(rT.mean()), float(rT.std(ddof=1) / np.sqrt(rT.shape[0])) if rT.shape[0] > 1 else 0.0


def density_path(model: ModelSpec, path: ForwardPath) -> DensityPath:
    """log rho_{k+1} = log rho_k + h_k . dY_k - |h_k|^2 dt / 2."""
    inc = path.increments
    steps = np.einsum("mkj,mkj->mk", inc.h, inc.dY) - 0.5 * inc.dt * np.sum(inc.h ** 2, axis=2)
    log_rho = np.zeros((path.M, path.n_steps + 1))
    np.cumsum(steps, axis=1, out=log_rho[:, 1:])
    return DensityPath(log_rho=log_rho)


def log_weight_ratio(perturbed: ForwardPath, reference: ForwardPath) -> np.ndarray:
    """log(rho'_k / rho_k) for two paths that share the observation increments.

    Returns the cumulative ratio (M, n+1); it is the likelihood of the
    perturbed control's observation law against the reference one.
    """
    inc_p, inc_r = perturbed.increments, reference.increments
    if not np.array_equal(inc_p.dY, inc_r.dY):
        raise InvalidArgument("weight ratio needs paths driven by the same observation increments")
    dh = inc_p.h - inc_r.h
    steps = (np.einsum("mkj,mkj->mk", dh, inc_r.dY)
             - 0.5 * inc_r.dt * (np.sum(inc_p.h ** 2, axis=2) - np.sum(inc_r.h ** 2, axis=2)))
    out = np.zeros((perturbed.M, perturbed.n_steps + 1))
    np.cumsum(steps, axis=1, out=out[:, 1:])
    return out


def variation_lambda(model: ModelSpec, lin: HatLinearization, x1: np.ndarray,
                     v: np.ndarray) -> np.ndarray:
    """Lambda_{k+1} = Lambda_k + (h_x x1_k + h_u v_k) . dB_k, Lambda_0 = 0."""
    path = lin.path
    M, n = path.M, path.n_steps
    if x1.shape[:2] != (M, n + 1) or v.shape[:2] != (M, n):
        raise ShapeError(f"x1 {x1.shape} / v {v.shape} do not match ensemble ({M}, {n})")
    dB = path.increments.dB
    lam = np.zeros((M, n + 1))
    for k in range(n):
        h = lin.at(k).observation
        dh = (np.einsum("...jn,...n->...j", h.d_x, x1[:, k])
              + np.einsum("...jc,...c->...j", h.d_u, v[:, k]))
        lam[:, k + 1] = lam[:, k] + np.einsum("mj,mj->m", np.broadcast_to(dh, dB[:, k].shape), dB[:, k])
    return lam


# ------------------------------------------------------------------ #
#  Cost functional                                                   #
# ------------------------------------------------------------------ #

class MeasureForm(str, Enum):
    Q_FORM = "Q_form"       # E^u[ int L + phi(x_T) ] + psi(y_0)
    P_FORM = "P_form"       # E[ int rho L + rho_T phi(x_T) ] + psi(y_0)


@dataclass
class CostReport:
    J_estimate: float
    std_error: float
    components: dict = field(default_factory=dict)
    measure_form: MeasureForm = MeasureForm.Q_FORM
    M: int = 0
    per_path: Optional[np.ndarray] = field(default=None, repr=False)   # excludes psi(y_0)

    def to_dict(self) -> dict:
        return {"J": self.J_estimate, "std_error": self.std_error,
                "components": self.components, "measure_form": self.measure_form.value, "M": self.M}


def running_cost_path(model: ModelSpec, path: ForwardPath, bsde) -> np.ndarray:
    """Mark-integrated running cost per step, (M, n)."""
    dt = path.grid.dt
    out = np.empty((path.M, path.n_steps))
    for k in range(path.n_steps):
        L = model.running_cost(k * dt, path.x[:, k], path.u[:, k], bsde.state(k), derivatives=False)
        out[:, k] = L.value @ model.quad_weights
    return out


def compute_cost(model: ModelSpec, path: ForwardPath, bsde,
                 form: MeasureForm = MeasureForm.Q_FORM,
                 rho: Optional[DensityPath] = None,
                 log_weights: Optional[np.ndarray] = None) -> CostReport:
    """Monte Carlo cost estimate with standard error.

    Q_form averages plainly over an ensemble simulated under the control's
    observation law. P_form weights each step by rho_k (rho_T at the
    terminal time) on an ensemble where Y is the reference Brownian motion.
    `log_weights` (M, n+1) applies an extra per-step likelihood ratio.
    """
    form = MeasureForm(form)
    if form == MeasureForm.P_FORM and rho is None:
        raise InvalidArgument("P_form cost needs the density path rho")
    dt = path.grid.dt
    running = running_cost_path(model, path, bsde)
    terminal = model.terminal_cost(path.x[:, -1], derivatives=False).value

    logw = np.zeros((path.M, path.n_steps + 1))
    if form == MeasureForm.P_FORM:
        logw = logw + rho.log_rho
    if log_weights is not None:
        if log_weights.shape != logw.shape:
            raise ShapeError(f"log_weights must be {logw.shape}, got {log_weights.shape}")
        logw = logw + log_weights
    w = np.exp(logw)

    run_pp = dt * np.sum(w[:, :-1] * running, axis=1)
    term_pp = w[:, -1] * terminal
    recursive, _ = model.recursive_cost(bsde.y0)
    per_path = run_pp + term_pp
    M = path.M
    se = float(per_path.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    report = CostReport(
        J_estimate=float(per_path.mean() + recursive), std_error=se,
        components={"running": float(run_pp.mean()), "terminal": float(term_pp.mean()),
                    "recursive": float(recursive)},
        measure_form=form, M=M, per_path=per_path)
    logger.debug("cost (%s): %.6g +- %.2g", form.value, report.J_estimate, se)
    return report


def forms_agree(q_report: CostReport, p_report: CostReport, n_se: float = 3.0) -> tuple[float, float, bool]:
    """(difference, combined SE, within n_se) for two cost estimates on independent ensembles."""
    diff = q_report.J_estimate - p_report.J_estimate
    se = float(np.hypot(q_report.std_error, p_report.std_error))
    return diff, se, abs(diff) <= n_se * se + 1e-12
