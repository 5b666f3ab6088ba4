"""
tools/smp.py
Direct maximum-principle machinery on a simulated reference ensemble:
first variation of the cost, duality residuals between the costate BSPDE
and linear forward equations, the Hamiltonian control gradient, and a
projected gradient optimizer over the policy parameters.

All adjoint work runs on an ensemble simulated under the reference
control's observation law (B is the driving Brownian motion and
dY = h dt + dB), so every expectation below is a plain ensemble mean.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from tools.backward import (BackwardJets, BsdeSolution, BspdeCoeffs, BspdeSolution,
                            assemble_P_equation, build_projectors, solve_auxiliary_pq,
                            solve_bsde, solve_ell, solve_first_variation_bsde,
                            solve_singular_bspde)
from tools.errors import InvalidArgument, ShapeError, StepSizeCollapse, require
from tools.forward import (ForwardPath, HatLinearization, LinearSpdeCoeffs, Measure,
                           simulate_first_variation, simulate_forward, simulate_linear_spde)
from tools.girsanov import CostReport, MeasureForm, compute_cost, log_weight_ratio, variation_lambda
from tools.models import ModelSpec
from tools.noise import NoiseBatch
from tools.policy import PolicyParams, direction_from_theta, project_theta
from tools.regression import ConditionalExpectation, RegressionBasis

logger = logging.getLogger(__name__)

STATIONARY_SE = 3.0


# ================================================================== #
#  Reference ensemble and costate                                    #
# ================================================================== #

@dataclass
class HatEnsemble:
    """Reference path, its BSDE solution and the forward adjoint ell."""
    model: ModelSpec
    policy: PolicyParams
    batch: NoiseBatch
    basis: RegressionBasis
    path: ForwardPath
    lin: HatLinearization
    projectors: list[ConditionalExpectation]
    bsde: BsdeSolution
    jets: BackwardJets
    ell: np.ndarray             # (M, n+1, D)

    @property
    def decay(self) -> np.ndarray:
        return self.model.space.decay(self.path.grid.dt)

    @property
    def dt(self) -> float:
        return self.path.grid.dt


def build_hat_ensemble(model: ModelSpec, policy: PolicyParams, batch: NoiseBatch,
                       basis: RegressionBasis) -> HatEnsemble:
    path, _ = simulate_forward(model, policy, batch, measure=Measure.Q)
    lin = HatLinearization(model, path)
    projectors = build_projectors(path, basis)
    bsde = solve_bsde(model, path, projectors)
    jets = BackwardJets(model, path, bsde)
    ell = solve_ell(model, path, bsde, jets)
    return HatEnsemble(model=model, policy=policy, batch=batch, basis=basis, path=path, lin=lin,
                       projectors=projectors, bsde=bsde, jets=jets, ell=ell)


@dataclass
class Costate:
    projectors: list[ConditionalExpectation]
    pq: BsdeSolution
    coeffs: BspdeCoeffs
    P: BspdeSolution


def _bracket_q1_reducer(lin: HatLinearization):
    def reduce(k: int, q1: np.ndarray) -> np.ndarray:
        return np.einsum("...inc,...ni->...c", lin.at(k).noise_w.d_u, q1)
    return reduce


def solve_costate(hat: HatEnsemble, extra: Optional[np.ndarray] = None,
                  truncation_n: Optional[int] = None, keep_q1: bool = False,
                  reducers: Optional[dict] = None, trace_norms: bool = False) -> Costate:
    """Auxiliary (p, q) and the costate (P, Q1, Q2, Q3) on shared projectors.

    The projectors regress on (x, Y, ell) plus any `extra` features (M, n+1, p).
    """
    feats = hat.ell if extra is None else np.concatenate([hat.ell, extra], axis=2)
    projectors = build_projectors(hat.path, hat.basis, extra=feats)
    pq = solve_auxiliary_pq(hat.model, hat.path, hat.bsde, projectors)
    coeffs = assemble_P_equation(hat.model, hat.lin, hat.bsde, hat.ell, pq, hat.jets)
    red = {"bracket_q1": _bracket_q1_reducer(hat.lin)}
    red.update(reducers or {})
    P = solve_singular_bspde(coeffs, hat.path.increments, hat.decay, projectors,
                             truncation_n=truncation_n, keep_q1=keep_q1, reducers=red,
                             trace_norms=trace_norms)
    return Costate(projectors=projectors, pq=pq, coeffs=coeffs, P=P)


@dataclass
class AdjointBundle:
    hat: HatEnsemble
    costate: Costate


def build_adjoint_bundle(model: ModelSpec, policy: PolicyParams, batch: NoiseBatch,
                         basis: RegressionBasis, extra_features: Optional[np.ndarray] = None,
                         **costate_options) -> AdjointBundle:
    hat = build_hat_ensemble(model, policy, batch, basis)
    return AdjointBundle(hat=hat, costate=solve_costate(hat, extra_features, **costate_options))


# ================================================================== #
#  Hamiltonian control gradient                                      #
# ================================================================== #

def direct_bracket(hat: HatEnsemble, costate: Costate) -> np.ndarray:
    """u-gradient of the Hamiltonian along the reference path, (M, n, c).

    R^T C + sum_i Gamma_i^T Q1 e_i + G2_u^T Q2 + pi Theta_u^T Q3
    + sum_q w_q (L_u - g_u^T ell) + h_u^T q2, with C the predicted costate.
    """
    model, path, P = hat.model, hat.path, costate.P
    M, n, c = path.M, path.n_steps, model.control_dim
    w, rates = model.quad_weights, model.jm.rates
    q2 = costate.pq.r[:, :, 0, :]
    out = np.empty((M, n, c))
    for k in range(n):
        st = hat.lin.at(k)
        g, L = hat.jets.at(k)
        br = np.einsum("...nc,...n->...c", st.R_hat, P.Z_pred[:, k])
        br = br + P.reductions["bracket_q1"][:, k]
        br = br + np.einsum("...jnc,...jn->...c", st.noise_b.d_u, P.Q2[:, k])
        if model.K:
            br = br + np.einsum("q,...qnc,...qn->...c", rates, st.jump.d_u, P.Q3[:, k])
        gl = np.einsum("...qac,...a->...qc", g.d_u, hat.ell[:, k])
        br = br + np.einsum("q,...qc->...c", w, L.d_u - gl)
        br = br + np.einsum("...jc,...j->...c", st.observation.d_u, q2[:, k])
        out[:, k] = br
    return out


def _knot_onehot(policy: PolicyParams, n_steps: int) -> np.ndarray:
    onehot = np.zeros((n_steps, policy.n_knots))
    onehot[np.arange(n_steps), [policy.knot_of_step(k, n_steps) for k in range(n_steps)]] = 1.0
    return onehot


@dataclass
class SmpGradient:
    """Policy-parameter gradient built from the Hamiltonian bracket.

    values[knot, c, f] = E sum_{k in knot} dt bracket_k[c] phi_f(k), i.e. the
    F^Y conditional expectation of the bracket tested against every policy
    feature. knot_regression holds the least-squares coefficients of the
    bracket on the policy features, pooled over each knot.
    """
    values: np.ndarray
    std_error: np.ndarray
    per_path: np.ndarray = field(repr=False)
    bracket: np.ndarray = field(repr=False)
    knot_regression: Optional[np.ndarray] = None
    route: str = "direct"

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    @property
    def z_scores(self) -> np.ndarray:
        return np.abs(self.values) / np.maximum(self.std_error, 1e-300)

    def is_stationary(self, n_se: float = STATIONARY_SE) -> bool:
        return bool(np.all(np.abs(self.values) <= n_se * self.std_error))

    def inner(self, delta: np.ndarray) -> tuple[float, float, np.ndarray]:
        """<gradient, delta> with its standard error and per-path samples."""
        delta = np.asarray(delta, dtype=float).reshape(self.values.shape)
        pp = np.einsum("mjcf,jcf->m", self.per_path, delta)
        return float(pp.mean()), float(pp.std(ddof=1) / np.sqrt(pp.shape[0])), pp

    def table(self) -> list[dict]:
        rows = []
        for idx in np.ndindex(*self.values.shape):
            rows.append({"knot": idx[0], "control": idx[1], "feature": idx[2],
                         "value": float(self.values[idx]), "std_error": float(self.std_error[idx]),
                         "z": float(self.z_scores[idx])})
        return rows


def gradient_from_bracket(policy: PolicyParams, path: ForwardPath, bracket: np.ndarray,
                          weights: Optional[np.ndarray] = None, route: str = "direct") -> SmpGradient:
    """Project a per-step bracket (M, n, c) onto the policy parameters.

    `weights` (n,) replaces dt when the bracket is only evaluated on a subgrid.
    """
    if path.phi is None or path.active is None:
        raise InvalidArgument("gradient needs a path simulated from a policy (features unavailable)")
    M, n, c = bracket.shape
    onehot = _knot_onehot(policy, n)
    wk = np.full(n, path.grid.dt) if weights is None else np.asarray(weights, dtype=float)
    masked = bracket * path.active
    per_path = np.einsum("k,kj,mkc,mkf->mjcf", wk, onehot, masked, path.phi)
    values = per_path.mean(axis=0)
    se = per_path.std(axis=0, ddof=1) / np.sqrt(M)

    reg = np.zeros(policy.theta.shape)
    for j in range(policy.n_knots):
        ks = np.nonzero((onehot[:, j] > 0) & (wk > 0))[0]
        if ks.size == 0:
            continue
        phi = path.phi[:, ks].reshape(-1, policy.n_features)
        for ci in range(c):
            rows = path.active[:, ks, ci].reshape(-1)
            if rows.sum() > policy.n_features:
                reg[j, ci] = np.linalg.lstsq(phi[rows], bracket[:, ks, ci].reshape(-1)[rows],
                                             rcond=None)[0]
    return SmpGradient(values=values, std_error=se, per_path=per_path, bracket=bracket,
                       knot_regression=reg, route=route)


def smp_gradient(bundle: AdjointBundle) -> SmpGradient:
    hat = bundle.hat
    grad = gradient_from_bracket(hat.policy, hat.path, direct_bracket(hat, bundle.costate))
    logger.info("SMP gradient norm %.4g (max z %.2f)", grad.norm, float(grad.z_scores.max()))
    return grad


# ================================================================== #
#  First variation of the cost                                       #
# ================================================================== #

@dataclass
class FirstVariation:
    I_v: float
    std_error: float
    per_path: np.ndarray = field(repr=False)
    components: dict = field(default_factory=dict)
    x1: Optional[np.ndarray] = field(default=None, repr=False)
    lam: Optional[np.ndarray] = field(default=None, repr=False)
    y1: Optional[BsdeSolution] = field(default=None, repr=False)


def variation_features(hat: HatEnsemble, x1: np.ndarray, lam: np.ndarray,
                       v: np.ndarray) -> np.ndarray:
    """Extra regression features (x1, Lambda, v) on the (M, n+1) grid; ell is added by the caller."""
    M, n = hat.path.M, hat.path.n_steps
    v_pad = np.concatenate([v, np.zeros((M, 1, v.shape[2]))], axis=1)
    return np.concatenate([x1, lam[:, :, None], v_pad], axis=2)


def first_variation_I(hat: HatEnsemble, v: np.ndarray,
                      projectors: Optional[list[ConditionalExpectation]] = None) -> FirstVariation:
    """I(v): derivative of the cost along u + eps v on shared noise."""
    model, path, bsde = hat.model, hat.path, hat.bsde
    if v.shape != path.u.shape:
        raise ShapeError(f"direction shape {v.shape} does not match controls {path.u.shape}")
    M, n, dt = path.M, path.n_steps, hat.dt
    w = model.quad_weights
    x1 = simulate_first_variation(model, path, v, hat.lin).states
    lam = variation_lambda(model, hat.lin, x1, v)
    if projectors is None:
        extra = np.concatenate([hat.ell, variation_features(hat, x1, lam, v)], axis=2)
        projectors = build_projectors(path, hat.basis, extra=extra)
    y1 = solve_first_variation_bsde(model, path, bsde, x1, v, projectors, hat.jets)

    parts = {name: np.zeros(M) for name in
             ("lambda_running", "L_x", "L_u", "L_y", "L_z", "L_r", "L_gamma")}
    for k in range(n):
        _, L = hat.jets.at(k)
        s1 = y1.state(k)
        run = L.value @ w
        parts["lambda_running"] += dt * lam[:, k] * run
        parts["L_x"] += dt * np.einsum("q,...qn,...n->...", w, L.d_x, x1[:, k])
        parts["L_u"] += dt * np.einsum("q,...qc,...c->...", w, L.d_u, v[:, k])
        parts["L_y"] += dt * np.einsum("q,...qb,...b->...", w, L.d_y, s1.y)
        parts["L_z"] += dt * np.einsum("q,...qbi,...bi->...", w, L.d_z, s1.z)
        parts["L_r"] += dt * np.einsum("q,...qbj,...bj->...", w, L.d_r, s1.r)
        parts["L_gamma"] += dt * np.einsum("q,...qb,...qb->...", w, L.d_gamma, s1.gamma)
    phi_T = model.terminal_cost(path.x[:, -1])
    parts["lambda_terminal"] = lam[:, -1] * phi_T.value
    parts["phi_x"] = np.einsum("...n,...n->...", phi_T.d_x, x1[:, -1])
    _, psi_grad = model.recursive_cost(bsde.y0)
    parts["psi_y"] = y1.y[:, 0] @ psi_grad

    per_path = sum(np.broadcast_to(p, (M,)) for p in parts.values())
    return FirstVariation(I_v=float(per_path.mean()),
                          std_error=float(per_path.std(ddof=1) / np.sqrt(M)),
                          per_path=per_path,
                          components={k: float(np.mean(p)) for k, p in parts.items()},
                          x1=x1, lam=lam, y1=y1)


def perturbed_run(hat: HatEnsemble, v: np.ndarray, eps: float) -> tuple[ForwardPath, BsdeSolution, np.ndarray]:
    """Path, BSDE and log weight ratio for controls u + eps v on the reference observations."""
    model, path = hat.model, hat.path
    controls = model.project_control(path.u + eps * v)
    pert, _ = simulate_forward(model, None, hat.batch, controls=controls,
                               observation=path.increments.dY,
                               obs_drift=path.increments.obs_drift)
    bsde = solve_bsde(model, pert, hat.projectors, keep_rules=False)
    return pert, bsde, log_weight_ratio(pert, path)


def finite_difference_slopes(hat: HatEnsemble, v: np.ndarray,
                             eps_list) -> dict[float, tuple[float, float]]:
    """(J(u + eps v) - J(u)) / eps with its standard error, on common random numbers."""
    model = hat.model
    base = compute_cost(model, hat.path, hat.bsde)
    out = {}
    for eps in eps_list:
        require(eps != 0, "finite-difference step must be non-zero")
        pert, bsde, logw = perturbed_run(hat, v, eps)
        rep = compute_cost(model, pert, bsde, log_weights=logw)
        diff = (rep.per_path - base.per_path) / eps
        psi = (rep.components["recursive"] - base.components["recursive"]) / eps
        out[float(eps)] = (float(diff.mean() + psi), float(diff.std(ddof=1) / np.sqrt(diff.shape[0])))
    return out


@dataclass
class VariationReport:
    I_v: float
    I_se: float
    fd_slopes: dict
    fd_se: dict
    errors: dict
    extrapolated: float
    agreement: float
    components: dict = field(default_factory=dict)

    @property
    def errors_decreasing(self) -> bool:
        errs = [self.errors[e] for e in sorted(self.errors, reverse=True)]
        return all(b <= a for a, b in zip(errs, errs[1:]))

    def to_dict(self) -> dict:
        return {"I_v": self.I_v, "I_se": self.I_se,
                "fd_slopes": {repr(k): v for k, v in self.fd_slopes.items()},
                "fd_se": {repr(k): v for k, v in self.fd_se.items()},
                "errors": {repr(k): v for k, v in self.errors.items()},
                "extrapolated": self.extrapolated, "agreement": self.agreement,
                "errors_decreasing": self.errors_decreasing, "components": self.components}


def variation_report(hat: HatEnsemble, v: np.ndarray, eps_list) -> VariationReport:
    """I(v) against finite-difference slopes; agreement is measured at the smallest eps."""
    fv = first_variation_I(hat, v)
    slopes = finite_difference_slopes(hat, v, eps_list)
    eps_sorted = sorted(slopes)
    small = eps_sorted[0]
    if len(eps_sorted) > 1 and np.isclose(eps_sorted[1], 2 * small):
        extrapolated = 2 * slopes[small][0] - slopes[eps_sorted[1]][0]
    else:
        extrapolated = slopes[small][0]
    ref = slopes[small][0]
    agreement = abs(fv.I_v - ref) / max(abs(ref), 1e-300)
    return VariationReport(
        I_v=fv.I_v, I_se=fv.std_error,
        fd_slopes={e: s for e, (s, _) in slopes.items()},
        fd_se={e: se for e, (_, se) in slopes.items()},
        errors={e: abs(s - fv.I_v) for e, (s, _) in slopes.items()},
        extrapolated=float(extrapolated), agreement=float(agreement), components=fv.components)


@dataclass
class ScalingReport:
    eps: list
    x_sup: list
    rho_sup: list
    x_slope: float
    rho_slope: float


def _loglog_slope(eps, values) -> float:
    vals = np.asarray(values, dtype=float)
    if np.any(vals <= 0):
        return float("nan")
    return float(np.polyfit(np.log(eps), np.log(vals), 1)[0])


def difference_scaling(hat: HatEnsemble, v: np.ndarray, eps_list) -> ScalingReport:
    """sup_k E|x^eps_k - x_k|^2 and sup_k E|rho^eps_k / rho_k - 1|^2 against eps."""
    x_sup, rho_sup = [], []
    for eps in eps_list:
        pert, _, logw = perturbed_run(hat, v, eps)
        x_sup.append(float(np.max(np.mean(np.sum((pert.x - hat.path.x) ** 2, axis=2), axis=0))))
        rho_sup.append(float(np.max(np.mean(np.expm1(logw) ** 2, axis=0))))
    eps = [float(e) for e in eps_list]
    return ScalingReport(eps=eps, x_sup=x_sup, rho_sup=rho_sup,
                         x_slope=_loglog_slope(eps, x_sup), rho_slope=_loglog_slope(eps, rho_sup))


def random_direction(hat: HatEnsemble, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(delta, v): a unit-norm parameter direction and the control direction it induces."""
    delta = rng.standard_normal(hat.policy.theta.shape)
    delta /= np.linalg.norm(delta)
    return delta, direction_from_theta(hat.policy, delta, hat.path.phi, hat.path.active)


@dataclass
class ConsistencyRow:
    I_v: float
    inner: float
    difference: float
    std_error: float
    passed: bool


def smp_consistency(hat: HatEnsemble, n_directions: int = 5, seed: int = 0,
                    n_se: float = STATIONARY_SE) -> list[ConsistencyRow]:
    """I(v) against <gradient, delta> for random policy directions, one costate per direction."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_directions):
        delta, v = random_direction(hat, rng)
        fv = first_variation_I(hat, v)
        extra = variation_features(hat, fv.x1, fv.lam, v)
        costate = solve_costate(hat, extra=extra)
        grad = gradient_from_bracket(hat.policy, hat.path, direct_bracket(hat, costate))
        inner, _, pp = grad.inner(delta)
        diff = fv.per_path - pp
        se = float(diff.std(ddof=1) / np.sqrt(diff.shape[0]))
        d = fv.I_v - inner
        rows.append(ConsistencyRow(I_v=fv.I_v, inner=inner, difference=d, std_error=se,
                                   passed=abs(d) <= n_se * se + 1e-12))
    return rows


# ================================================================== #
#  Duality between the costate and linear forward equations          #
# ================================================================== #

@dataclass
class DualityReport:
    lhs: float
    rhs: float
    residual: float
    std_error: float
    passed: bool
    truncation_n: Optional[int] = None
    chi_truncation: int = 0
    s_index: int = 0

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "residual": self.residual,
                "std_error": self.std_error, "passed": self.passed,
                "truncation_n": self.truncation_n, "chi_truncation": self.chi_truncation,
                "s_index": self.s_index}


def duality_residual(costate_coeffs: BspdeCoeffs, forward: LinearSpdeCoeffs, hat: HatEnsemble,
                     s_index: int = 0, x_s: Optional[np.ndarray] = None,
                     truncation_n: Optional[int] = None, n_se: float = STATIONARY_SE) -> DualityReport:
    """E<eta, X_T> + E sum dt <J, X> - E<Z_s, X_s> against the forcing pairings.

    The forward equation must use the adjoints of the costate coefficients
    (Q1 = V^T, same K, Q2 = E^T, Q3 = E3^T); truncations apply to both sides.
    """
    path, inc = hat.path, hat.path.increments
    M, n, N = path.M, path.n_steps, hat.model.N
    dt = inc.dt
    x_s = np.zeros(N) if x_s is None else x_s
    X = simulate_linear_spde(forward, inc, hat.decay, x_s, s_index).states
    projectors = build_projectors(path, hat.basis, extra=np.concatenate([hat.ell, X], axis=2))

    reducers = {}
    if forward.gamma_dag is not None:
        reducers["gamma"] = lambda k, q1: np.broadcast_to(
            np.einsum("...ni,...ni->...", forward.gamma_dag(k), q1), (M,))
    m_tr = forward.chi_truncation
    if forward.chi is not None and m_tr and forward.k_ops is not None:
        reducers["chi"] = lambda k, q1: np.broadcast_to(np.einsum(
            "...inm,...m,...ni->...", forward.k_ops(k)[:, :m_tr], forward.chi(k), q1[:, :, :m_tr]), (M,))
    n_tr = forward.k_truncation if truncation_n is None else truncation_n
    P = solve_singular_bspde(costate_coeffs, inc, hat.decay, projectors,
                             truncation_n=n_tr, reducers=reducers)

    lhs = np.einsum("mn,mn->m", costate_coeffs.eta, X[:, -1]) - np.einsum("mn,mn->m", P.Z[:, s_index], X[:, s_index])
    rhs = np.zeros(M)
    rates = inc.rates
    for k in range(s_index, n):
        if costate_coeffs.J is not None:
            lhs += dt * np.einsum("mn,mn->m", np.broadcast_to(costate_coeffs.J(k), (M, N)), X[:, k])
        if forward.r_dag is not None:
            rhs += dt * np.einsum("mn,mn->m", P.Z_pred[:, k], np.broadcast_to(forward.r_dag(k), (M, N)))
        for name in reducers:
            rhs += dt * P.reductions[name][:, k]
        if forward.r2 is not None:
            rhs += dt * np.einsum("mjn,mjn->m", P.Q2[:, k], np.broadcast_to(forward.r2(k), P.Q2[:, k].shape))
        if forward.r3 is not None and rates.size:
            rhs += dt * np.einsum("q,mqn,mqn->m", rates, P.Q3[:, k],
                                  np.broadcast_to(forward.r3(k), P.Q3[:, k].shape))
    D = lhs - rhs
    se = float(D.std(ddof=1) / np.sqrt(M))
    resid = float(D.mean())
    report = DualityReport(lhs=float(lhs.mean()), rhs=float(rhs.mean()), residual=resid,
                           std_error=se, passed=abs(resid) <= n_se * se + 1e-12,
                           truncation_n=n_tr, chi_truncation=m_tr, s_index=s_index)
    logger.info("duality (n=%s, m=%d): residual %.3e +- %.2e", n_tr, m_tr, resid, se)
    return report


def model_costate_coeffs(hat: HatEnsemble) -> BspdeCoeffs:
    projectors = build_projectors(hat.path, hat.basis, extra=hat.ell)
    pq = solve_auxiliary_pq(hat.model, hat.path, hat.bsde, projectors)
    return assemble_P_equation(hat.model, hat.lin, hat.bsde, hat.ell, pq, hat.jets)


def duality_check_direct(hat: HatEnsemble, v: Optional[np.ndarray] = None,
                         forcing: Optional[LinearSpdeCoeffs] = None, s_index: int = 0,
                         x_s: Optional[np.ndarray] = None,
                         costate_coeffs: Optional[BspdeCoeffs] = None) -> DualityReport:
    """Duality of the full costate with the forced linearized state equation.

    The forcing is either given or derived from a control direction v.
    """
    if forcing is None:
        require(v is not None, "duality check needs a direction v or explicit forcing")
        forcing = hat.lin.first_variation_coeffs(v)
    forcing = replace(forcing, k_truncation=None, chi_truncation=0, chi=None)
    return duality_residual(costate_coeffs or model_costate_coeffs(hat), forcing, hat,
                            s_index=s_index, x_s=x_s)


def duality_check_truncated(hat: HatEnsemble, n: int, m: int,
                            chi: Optional[Callable[[int], np.ndarray]] = None,
                            v: Optional[np.ndarray] = None,
                            forcing: Optional[LinearSpdeCoeffs] = None, s_index: int = 0,
                            x_s: Optional[np.ndarray] = None,
                            costate_coeffs: Optional[BspdeCoeffs] = None) -> DualityReport:
    """Duality of the n-truncated costate with the (m, n) truncated forward equation."""
    require(0 <= m <= hat.model.n_W and 0 <= n <= hat.model.n_W,
            f"truncations (m={m}, n={n}) must lie in [0, n_W={hat.model.n_W}]")
    if forcing is None:
        forcing = (hat.lin.first_variation_coeffs(v) if v is not None
                   else hat.lin.homogeneous_coeffs())
    if chi is None:
        scale = 1.0 / (1.0 + np.max(np.abs(hat.path.x)))
        chi = lambda k: scale * hat.path.x[:, k]
    forcing = replace(forcing, k_truncation=n, chi_truncation=m, chi=chi)
    return duality_residual(costate_coeffs or model_costate_coeffs(hat), forcing, hat,
                            s_index=s_index, x_s=x_s, truncation_n=n)


def duality_ladder(hat: HatEnsemble, ladder, v: Optional[np.ndarray] = None) -> list[DualityReport]:
    coeffs = model_costate_coeffs(hat)
    return [duality_check_truncated(hat, n, n, v=v, costate_coeffs=coeffs) for n in ladder]


# ================================================================== #
#  Optimization                                                      #
# ================================================================== #

class CommonNoiseCost:
    """theta -> Q-form cost on one fixed noise batch."""

    def __init__(self, model: ModelSpec, policy: PolicyParams, batch: NoiseBatch,
                 basis: RegressionBasis):
        self.model = model
        self.policy = policy
        self.batch = batch
        self.basis = basis
        self.evaluations = 0

    def report(self, theta: np.ndarray) -> CostReport:
        pp = self.policy.with_theta(theta)
        path, _ = simulate_forward(self.model, pp, self.batch, measure=Measure.Q)
        bsde = solve_bsde(self.model, path, self.basis, keep_rules=False)
        self.evaluations += 1
        return compute_cost(self.model, path, bsde, MeasureForm.Q_FORM)

    def __call__(self, theta: np.ndarray) -> float:
        return self.report(theta).J_estimate


@dataclass
class OptimizerOptions:
    step: float = 0.5
    iters: int = 30
    tol: float = 1e-6
    n_se: float = STATIONARY_SE
    max_backtracks: int = 10
    shrink: float = 0.5
    grow: float = 1.0

    def __post_init__(self):
        require(self.step > 0, f"step must be positive, got {self.step}")
        require(self.iters >= 1, f"iters must be at least 1, got {self.iters}")
        require(0 < self.shrink < 1, f"shrink must lie in (0, 1), got {self.shrink}")


@dataclass
class IterationRecord:
    iteration: int
    J: float
    std_error: float
    grad_norm: float
    step: float
    accepted: bool

    def row(self) -> list:
        return [self.iteration, self.J, self.std_error, self.grad_norm, self.step, self.accepted]


@dataclass
class OptimizationResult:
    policy: PolicyParams
    history: list[IterationRecord]
    status: str
    cost: CostReport
    gradient: SmpGradient
    initial_grad_norm: float

    @property
    def reduction(self) -> float:
        return self.initial_grad_norm / max(self.gradient.norm, 1e-300)


def optimize_policy(model: ModelSpec, pp0: PolicyParams, batch: NoiseBatch, basis: RegressionBasis,
                    opts: Optional[OptimizerOptions] = None,
                    on_iteration: Optional[Callable[[IterationRecord], None]] = None) -> OptimizationResult:
    """Projected gradient descent on theta with backtracking on a fixed noise batch.

    Stops when the gradient norm is below tol or every component is within
    n_se standard errors of zero.
    """
    opts = opts or OptimizerOptions()
    pp = pp0.with_theta(project_theta(pp0, pp0.theta, model.box_lo, model.box_hi))
    cost_fn = CommonNoiseCost(model, pp, batch, basis)
    step = opts.step
    history: list[IterationRecord] = []
    initial_norm = None
    status = "max_iters"

    for it in range(opts.iters):
        bundle = build_adjoint_bundle(model, pp, batch, basis)
        grad = smp_gradient(bundle)
        cost = compute_cost(model, bundle.hat.path, bundle.hat.bsde)
        initial_norm = grad.norm if initial_norm is None else initial_norm
        if grad.norm <= opts.tol or grad.is_stationary(opts.n_se):
            rec = IterationRecord(it, cost.J_estimate, cost.std_error, grad.norm, 0.0, True)
            history.append(rec)
            if on_iteration:
                on_iteration(rec)
            status = "converged" if grad.norm <= opts.tol else "stationary"
            break

        accepted = False
        for _ in range(opts.max_backtracks):
            theta_new = project_theta(pp, pp.theta - step * grad.values, model.box_lo, model.box_hi)
            if cost_fn(theta_new) < cost.J_estimate:
                accepted = True
                break
            step *= opts.shrink
        rec = IterationRecord(it, cost.J_estimate, cost.std_error, grad.norm, step, accepted)
        history.append(rec)
        if on_iteration:
            on_iteration(rec)
        if not accepted:
            exc = StepSizeCollapse(f"no decrease after {opts.max_backtracks} backtracks at iteration {it}",
                                   step_size=step)
            exc.history = history
            raise exc
        pp = pp.with_theta(theta_new)
        step *= opts.grow
        logger.info("iteration %d: J = %.6g, |G| = %.3g, step %.3g", it, cost.J_estimate, grad.norm, step)
    else:
        bundle = build_adjoint_bundle(model, pp, batch, basis)
        grad = smp_gradient(bundle)
        cost = compute_cost(model, bundle.hat.path, bundle.hat.bsde)

    return OptimizationResult(policy=pp, history=history, status=status, cost=cost,
                              gradient=grad, initial_grad_norm=initial_norm)


@dataclass
class NewtonResult:
    theta: np.ndarray
    J: float
    gradient: np.ndarray
    hessian: np.ndarray
    iterations: int


def _fd_gradient_hessian(f: Callable[[np.ndarray], float], x: np.ndarray,
                         h: float) -> tuple[np.ndarray, np.ndarray]:
    p = x.size
    e = np.eye(p) * h
    f0 = f(x)
    fp = np.array([f(x + e[i]) for i in range(p)])
    fm = np.array([f(x - e[i]) for i in range(p)])
    g = (fp - fm) / (2 * h)
    H = np.empty((p, p))
    for i in range(p):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h ** 2
        for j in range(i):
            H[i, j] = H[j, i] = (f(x + e[i] + e[j]) - f(x + e[i] - e[j])
                                 - f(x - e[i] + e[j]) + f(x - e[i] - e[j])) / (4 * h ** 2)
    return g, H


def newton_reference_optimum(cost: CommonNoiseCost, theta0: np.ndarray, n_iter: int = 3,
                             h: float = 1e-3) -> NewtonResult:
    """Minimize the common-noise cost by Newton steps, then a golden-section line search.

    Exact in one step when the cost is quadratic in theta.
    """
    shape = cost.policy.theta.shape
    lo, hi = cost.model.box_lo, cost.model.box_hi

    def f(flat: np.ndarray) -> float:
        return cost(project_theta(cost.policy, flat.reshape(shape), lo, hi))

    x = np.asarray(theta0, dtype=float).reshape(-1)
    g = H = None
    direction = np.zeros_like(x)
    for _ in range(n_iter):
        g, H = _fd_gradient_hessian(f, x, h)
        try:
            direction = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            direction = -np.linalg.lstsq(H, g, rcond=None)[0]
        x = project_theta(cost.policy, (x + direction).reshape(shape), lo, hi).reshape(-1)
    if np.any(direction):
        start = x - direction
        line = minimize_scalar(lambda a: f(start + a * direction), bracket=(0.0, 1.0), method="golden")
        if line.fun < f(x):
            x = project_theta(cost.policy, (start + line.x * direction).reshape(shape), lo, hi).reshape(-1)
    return NewtonResult(theta=x.reshape(shape), J=f(x), gradient=g, hessian=H, iterations=n_iter)


@dataclass
class FaceRow:
    knot: int
    control: int
    face: str
    value: float
    std_error: float
    passed: bool


def box_face_check(grad: SmpGradient, hat: HatEnsemble, n_se: float = STATIONARY_SE) -> list[FaceRow]:
    """E sum_{k in knot} dt (v - u_k) . bracket_k at v = lo and v = hi; passes when >= -n_se SE."""
    path, model = hat.path, hat.model
    M, n, c = grad.bracket.shape
    onehot = _knot_onehot(hat.policy, n)
    rows = []
    for face, bound in (("lo", model.box_lo), ("hi", model.box_hi)):
        pp = path.grid.dt * np.einsum("kj,mkc->mjc", onehot, (bound - path.u) * grad.bracket)
        mean, se = pp.mean(axis=0), pp.std(axis=0, ddof=1) / np.sqrt(M)
        for j in range(hat.policy.n_knots):
            for ci in range(c):
                rows.append(FaceRow(knot=j, control=ci, face=face, value=float(mean[j, ci]),
                                    std_error=float(se[j, ci]),
                                    passed=bool(mean[j, ci] >= -n_se * se[j, ci] - 1e-12)))
    return rows
