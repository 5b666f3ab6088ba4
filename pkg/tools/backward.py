"""
tools/backward.py
Least-squares Monte Carlo solvers for the backward equations: the
controlled BSDE with jumps, its first variation, the auxiliary cost BSDE,
the forward adjoint of the BSDE, and the truncated singular BSPDE.

Every backward step regresses all responses of that step on one shared
projector. Fitted rules are kept so a solution can be re-evaluated on a
perturbed noise ensemble.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from tools.errors import InvalidArgument, NumericalAbort, PicardError, ShapeError, require
from tools.forward import EquationForm, ForwardPath, HatLinearization, Increments
from tools.models import BackwardState, DriverJet, ModelSpec
from tools.regression import ConditionalExpectation, FittedProjection, RegressionBasis
from tools.spectral import fit_smoothing_exponent, SpectralSpace

logger = logging.getLogger(__name__)

PICARD_TOL = 1e-10
PICARD_CAP = 5
PICARD_DIVERGENCE = 1e-6


# ================================================================== #
#  Projectors                                                        #
# ================================================================== #

def build_projectors(path: ForwardPath, basis: RegressionBasis,
                     extra: Optional[np.ndarray] = None,
                     weights: Optional[np.ndarray] = None) -> list[ConditionalExpectation]:
    """One conditional expectation per step on features (x_k, Y_k[, extra_k])."""
    if extra is not None and extra.shape[:2] != (path.M, path.n_steps + 1):
        raise ShapeError(f"extra features must be (M, n+1, p), got {extra.shape}")
    out = []
    for k in range(path.n_steps):
        z = path.regression_features(k)
        if extra is not None:
            z = np.hstack([z, extra[:, k].reshape(path.M, -1)])
        out.append(ConditionalExpectation(basis, z, weights=weights, step=k))
    return out


# ================================================================== #
#  BSDE sweep                                                        #
# ================================================================== #

@dataclass
class BsdeSolution:
    y: np.ndarray               # (M, n+1, D)
    z: np.ndarray               # (M, n, D, n_W)
    r: np.ndarray               # (M, n, D, d)
    gamma: np.ndarray           # (M, n, Kq, D); zero for the null mark
    driver: np.ndarray          # (M, n, D) aggregated driver incl. measure shift
    form: EquationForm
    rules: Optional[list[FittedProjection]] = field(default=None, repr=False)
    replayable: bool = True

    @property
    def y0(self) -> np.ndarray:
        return self.y[:, 0].mean(axis=0)

    def state(self, k: int) -> BackwardState:
        return BackwardState(self.y[:, k], self.z[:, k], self.r[:, k], self.gamma[:, k])


DriverFn = Callable[[int, BackwardState], np.ndarray]


def _unpack(vals: np.ndarray, D: int, n_W: int, d: int, K: int, rates: np.ndarray,
            dt: float) -> tuple[np.ndarray, ...]:
    M = vals.shape[0]
    C = vals[:, :D]
    o = D
    z = vals[:, o:o + D * n_W].reshape(M, D, n_W) / dt
    o += D * n_W
    r = vals[:, o:o + D * d].reshape(M, D, d) / dt
    o += D * d
    if K:
        gamma = (vals[:, o:o + D * K].reshape(M, D, K) / (rates * dt)).transpose(0, 2, 1)
    else:
        gamma = np.zeros((M, 1, D))
    return C, z, r, gamma


def _responses(Y1: np.ndarray, dW: np.ndarray, dO: np.ndarray, dN: np.ndarray) -> np.ndarray:
    M = Y1.shape[0]
    parts = [Y1, (Y1[:, :, None] * dW[:, None, :]).reshape(M, -1),
             (Y1[:, :, None] * dO[:, None, :]).reshape(M, -1)]
    if dN.shape[1]:
        parts.append((Y1[:, :, None] * dN[:, None, :]).reshape(M, -1))
    return np.concatenate(parts, axis=1)


def _implicit_step(C, z, r, gamma, driver: Optional[DriverFn], k: int, m: np.ndarray, dt: float,
                   tol: float, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """y = C + dt (g(y, z, r, gamma) - r.m) by Picard iteration."""
    shift = -np.einsum("mdj,mj->md", r, m)
    if driver is None:
        return C + dt * shift, shift
    y = C
    prev = None
    incr = 0.0
    for _ in range(cap):
        g = driver(k, BackwardState(y, z, r, gamma)) + shift
        y_new = C + dt * g
        incr = float(np.max(np.abs(y_new - y)) / (1.0 + np.max(np.abs(y_new))))
        y = y_new
        if incr <= tol:
            break
        prev = incr
    else:
        logger.debug("step %d: Picard stopped at increment %.2e after %d iterations", k, incr, cap)
        if incr > PICARD_DIVERGENCE:
            ratio = incr / prev if prev else float("inf")
            raise PicardError("implicit backward step did not converge", contraction=ratio, step=k)
    return y, g


def backward_sweep(terminal: np.ndarray, projectors: list[ConditionalExpectation], inc: Increments,
                   form: EquationForm, driver: Optional[DriverFn], keep_rules: bool = True,
                   tol: float = PICARD_TOL, cap: int = PICARD_CAP) -> BsdeSolution:
    M, n, n_W = inc.dW.shape
    d, K = inc.dY.shape[2], inc.counts.shape[2]
    D = terminal.shape[1]
    dt = inc.dt
    require(len(projectors) == n, f"need {n} projectors, got {len(projectors)}")

    y = np.empty((M, n + 1, D))
    z = np.empty((M, n, D, n_W))
    r = np.empty((M, n, D, d))
    gamma = np.empty((M, n, max(K, 1), D))
    gvals = np.empty((M, n, D))
    rules: list[FittedProjection] = [None] * n
    y[:, n] = terminal
    dO = inc.martingale_increment(form)
    drift = inc.drift_for(form)
    dN = inc.dN

    for k in range(n - 1, -1, -1):
        fitted = projectors[k].fit(_responses(y[:, k + 1], inc.dW[:, k], dO[:, k], dN[:, k]))
        C, z[:, k], r[:, k], gamma[:, k] = _unpack(fitted.values, D, n_W, d, K, inc.rates, dt)
        y[:, k], gvals[:, k] = _implicit_step(C, z[:, k], r[:, k], gamma[:, k], driver, k,
                                              drift[:, k], dt, tol, cap)
        if not np.all(np.isfinite(y[:, k])):
            raise NumericalAbort("non-finite backward value", step=k)
        if keep_rules:
            rules[k] = fitted
    return BsdeSolution(y=y, z=z, r=r, gamma=gamma, driver=gvals, form=form,
                        rules=rules if keep_rules else None)


def aggregated_driver(model: ModelSpec, path: ForwardPath) -> DriverFn:
    w = model.quad_weights
    dt = path.grid.dt

    def fn(k: int, s: BackwardState) -> np.ndarray:
        g = model.driver(k * dt, path.x[:, k], path.u[:, k], s, derivatives=False).value
        return np.einsum("q,mqd->md", w, g)
    return fn


def solve_bsde(model: ModelSpec, path: ForwardPath,
               projectors: list[ConditionalExpectation] | RegressionBasis,
               form: EquationForm = EquationForm.Y_FORM, keep_rules: bool = True) -> BsdeSolution:
    """Controlled BSDE: terminal f(x_T), driver integrated against the mark weights."""
    if isinstance(projectors, RegressionBasis):
        projectors = build_projectors(path, projectors)
    terminal = model.terminal(path.x[:, -1], derivatives=False).value
    sol = backward_sweep(terminal, projectors, path.increments, form,
                         aggregated_driver(model, path), keep_rules=keep_rules)
    logger.info("BSDE solved: y0 = %s", np.array2string(sol.y0, precision=6))
    return sol


def replay_bsde(model: ModelSpec, solution: BsdeSolution, path: ForwardPath, start: int = 0,
                base: Optional[BsdeSolution] = None) -> BsdeSolution:
    """Re-evaluate a solved BSDE on a new path from its fitted rules.

    Steps before `start` are copied from `base` (their features are unchanged).
    """
    if solution.rules is None or not solution.replayable:
        raise InvalidArgument("solution carries no replayable decision rules")
    M, n = path.M, path.n_steps
    inc = path.increments
    D, n_W, d, Kq = solution.y.shape[2], inc.dW.shape[2], inc.dY.shape[2], solution.gamma.shape[2]
    K = inc.counts.shape[2]
    driver = aggregated_driver(model, path)
    drift = inc.drift_for(solution.form)

    y = np.empty((M, n + 1, D))
    z = np.empty((M, n, D, n_W))
    r = np.empty((M, n, D, d))
    gamma = np.empty((M, n, Kq, D))
    gvals = np.empty((M, n, D))
    if start:
        src = base if base is not None else solution
        y[:, :start], z[:, :start], r[:, :start] = src.y[:, :start], src.z[:, :start], src.r[:, :start]
        gamma[:, :start], gvals[:, :start] = src.gamma[:, :start], src.driver[:, :start]
    y[:, n] = model.terminal(path.x[:, n], derivatives=False).value
    for k in range(start, n):
        vals = solution.rules[k].predict(path.regression_features(k)).reshape(M, -1)
        C, z[:, k], r[:, k], gamma[:, k] = _unpack(vals, D, n_W, d, K, inc.rates, inc.dt)
        y[:, k], gvals[:, k] = _implicit_step(C, z[:, k], r[:, k], gamma[:, k], driver, k,
                                              drift[:, k], inc.dt, PICARD_TOL, PICARD_CAP)
    return BsdeSolution(y=y, z=z, r=r, gamma=gamma, driver=gvals, form=solution.form,
                        rules=solution.rules)


def martingale_residuals(sol: BsdeSolution, inc: Increments) -> tuple[np.ndarray, np.ndarray]:
    """Per-step mean and standard error of y_{k+1} - y_k + g dt - z dW - r dO - gamma dN."""
    dO = inc.martingale_increment(sol.form)
    res = (sol.y[:, 1:] - sol.y[:, :-1] + inc.dt * sol.driver
           - np.einsum("mkdi,mki->mkd", sol.z, inc.dW)
           - np.einsum("mkdj,mkj->mkd", sol.r, dO))
    if inc.counts.shape[2]:
        res -= np.einsum("mkqd,mkq->mkd", sol.gamma, inc.dN)
    M = res.shape[0]
    return res.mean(axis=0), res.std(axis=0, ddof=1) / np.sqrt(M)


# ------------------------------------------------------------------ #
#  Derivative data along the reference solution                      #
# ------------------------------------------------------------------ #

class BackwardJets:
    """Driver and running-cost jets along (x_hat, u_hat, y_hat, ...), cached per step."""

    def __init__(self, model: ModelSpec, path: ForwardPath, bsde: BsdeSolution):
        self.model = model
        self.path = path
        self.bsde = bsde
        self._k: Optional[int] = None
        self._jets: Optional[tuple[DriverJet, DriverJet]] = None

    def at(self, k: int) -> tuple[DriverJet, DriverJet]:
        if k != self._k:
            t, x, u = k * self.path.grid.dt, self.path.x[:, k], self.path.u[:, k]
            s = self.bsde.state(k)
            self._jets = (self.model.driver(t, x, u, s), self.model.running_cost(t, x, u, s))
            self._k = k
        return self._jets


def solve_ell(model: ModelSpec, path: ForwardPath, bsde: BsdeSolution,
              jets: Optional[BackwardJets] = None, start: int = 0,
              base: Optional[np.ndarray] = None) -> np.ndarray:
    """Forward adjoint of the BSDE, (M, n+1, D), with ell_0 = -grad psi(y_0).

    Written against the innovation B of the sampling measure.
    """
    jets = jets or BackwardJets(model, path, bsde)
    inc = path.increments
    M, n = path.M, path.n_steps
    w = model.quad_weights
    D = bsde.y.shape[2]
    ell = np.empty((M, n + 1, D))
    if start:
        require(base is not None, "restarting the adjoint needs the base trajectory")
        ell[:, :start + 1] = base[:, :start + 1]
    else:
        _, grad = model.recursive_cost(bsde.y0)
        ell[:, 0] = -grad
    dN = inc.dN
    for k in range(start, n):
        g, L = jets.at(k)
        lk = ell[:, k]
        a = np.einsum("q,mqb->mb", w, np.einsum("...qab,...a->...qb", g.d_y, lk) - L.d_y)
        b = np.einsum("q,mqbi->mbi", w, np.einsum("...qabi,...a->...qbi", g.d_z, lk) - L.d_z)
        c = np.einsum("q,mqbj->mbj", w, np.einsum("...qabj,...a->...qbj", g.d_r, lk) - L.d_r)
        c = c - lk[:, :, None] * inc.h[:, k][:, None, :]
        step = (lk + a * inc.dt + np.einsum("mbi,mi->mb", b, inc.dW[:, k])
                + np.einsum("mbj,mj->mb", c, inc.dB[:, k]))
        if model.K:
            e = np.einsum("...qab,...qa->...qb", g.d_gamma, lk[:, None, :]) - L.d_gamma
            step = step + np.einsum("mqb,mq->mb", np.broadcast_to(e, (M, model.K, D)), dN[:, k])
        if not np.all(np.isfinite(step)):
            raise NumericalAbort("non-finite adjoint value", step=k)
        ell[:, k + 1] = step
    return ell


def solve_auxiliary_pq(model: ModelSpec, path: ForwardPath, bsde: BsdeSolution,
                       projectors: list[ConditionalExpectation]) -> BsdeSolution:
    """p_T = phi(x_T), driver = mark-integrated running cost; B-form."""
    w = model.quad_weights
    dt = path.grid.dt
    running = np.empty((path.M, path.n_steps, 1))
    for k in range(path.n_steps):
        L = model.running_cost(k * dt, path.x[:, k], path.u[:, k], bsde.state(k), derivatives=False)
        running[:, k, 0] = L.value @ w
    terminal = model.terminal_cost(path.x[:, -1], derivatives=False).value[:, None]
    sol = backward_sweep(terminal, projectors, path.increments, EquationForm.B_FORM,
                         lambda k, s: running[:, k], keep_rules=False)
    sol.replayable = False
    return sol


def solve_first_variation_bsde(model: ModelSpec, path: ForwardPath, bsde: BsdeSolution,
                               x1: np.ndarray, v: np.ndarray,
                               projectors: list[ConditionalExpectation],
                               jets: Optional[BackwardJets] = None) -> BsdeSolution:
    """(y1, z1, r1, gamma1): linearization of the BSDE scheme in direction (x1, v)."""
    jets = jets or BackwardJets(model, path, bsde)
    w = model.quad_weights
    f = model.terminal(path.x[:, -1])
    terminal = np.einsum("...an,...n->...a", f.d_x, x1[:, -1])

    def driver(k: int, s: BackwardState) -> np.ndarray:
        g, _ = jets.at(k)
        per = (np.einsum("...qan,...n->...qa", g.d_x, x1[:, k])
               + np.einsum("...qac,...c->...qa", g.d_u, v[:, k])
               + np.einsum("...qab,...b->...qa", g.d_y, s.y)
               + np.einsum("...qabi,...bi->...qa", g.d_z, s.z)
               + np.einsum("...qabj,...bj->...qa", g.d_r, s.r)
               + np.einsum("...qab,...qb->...qa", g.d_gamma, s.gamma))
        return np.einsum("q,mqa->ma", w, per)

    sol = backward_sweep(terminal, projectors, path.increments, bsde.form, driver,
                         keep_rules=False, tol=1e-13, cap=8)
    sol.replayable = False
    return sol


# ================================================================== #
#  Singular BSPDE                                                    #
# ================================================================== #

@dataclass
class BspdeCoeffs:
    """-dZ = [A*Z + V Z + sum_{i<=n} K_i^* Q1 e_i + E_j Q2_j + pi_m E3_m Q3_m + J] dt - ...

    V, E, E3 act as given (already adjointed); K holds the forward operators
    K_i and is transposed inside the solver. None means zero.
    """
    eta: np.ndarray                                      # (M, N)
    V: Optional[Callable[[int], np.ndarray]] = None      # (., N, N)
    K: Optional[Callable[[int], np.ndarray]] = None      # (., n_W, N, N)
    E: Optional[Callable[[int], np.ndarray]] = None      # (., d, N, N)
    E3: Optional[Callable[[int], np.ndarray]] = None     # (., K, N, N)
    J: Optional[Callable[[int], np.ndarray]] = None      # (M, N)


@dataclass
class BspdeSolution:
    Z: np.ndarray               # (M, n+1, N)
    Z_pred: np.ndarray          # (M, n, N)   E[e^{dtA*} Z_{k+1} | F_k]
    Q2: np.ndarray              # (M, n, d, N)
    Q3: np.ndarray              # (M, n, K, N)
    truncation_n: int
    eta: np.ndarray
    Q1: Optional[np.ndarray] = None              # (M, n, N, n_W)
    q1_trace: Optional[np.ndarray] = None        # (M, n) trace norms of Q1
    reductions: dict[str, np.ndarray] = field(default_factory=dict)
    forcing_energy: Optional[np.ndarray] = None  # (M,) sum_k dt |J_k|^2


Q1Reducer = Callable[[int, np.ndarray], np.ndarray]


def solve_singular_bspde(coeffs: BspdeCoeffs, inc: Increments, decay: np.ndarray,
                         projectors: list[ConditionalExpectation],
                         truncation_n: Optional[int] = None,
                         form: EquationForm = EquationForm.B_FORM,
                         keep_q1: bool = False,
                         reducers: Optional[dict[str, Q1Reducer]] = None,
                         trace_norms: bool = False) -> BspdeSolution:
    """Backward exponential-Euler sweep with explicit coupling.

    Z_k = C_k + dt (V C_k + sum_{i<n} K_i^* Q1 e_i + E_j Q2_j + pi_m E3_m Q3_m + J_k)
    with C_k and the Q's regressed from e^{dtA*} Z_{k+1}.
    """
    M, n, n_W = inc.dW.shape
    d, K = inc.dY.shape[2], inc.counts.shape[2]
    N = decay.shape[0]
    dt = inc.dt
    n_tr = n_W if truncation_n is None else truncation_n
    require(0 <= n_tr <= n_W, f"truncation_n must lie in [0, n_W={n_W}], got {n_tr}")
    if coeffs.eta.shape != (M, N):
        raise ShapeError(f"terminal datum must be {(M, N)}, got {coeffs.eta.shape}")

    Z = np.empty((M, n + 1, N))
    Zp = np.empty((M, n, N))
    Q2 = np.empty((M, n, d, N))
    Q3 = np.empty((M, n, K, N))
    Q1_store = np.empty((M, n, N, n_W)) if keep_q1 else None
    traces = np.empty((M, n)) if trace_norms else None
    reduced: dict[str, list] = {name: [None] * n for name in (reducers or {})}
    energy = np.zeros(M)
    Z[:, n] = coeffs.eta
    dO = inc.martingale_increment(form)
    drift = inc.drift_for(form)
    dN = inc.dN

    for k in range(n - 1, -1, -1):
        Zh = decay * Z[:, k + 1]
        vals = projectors[k].fit(_responses(Zh, inc.dW[:, k], dO[:, k], dN[:, k])).values
        C, q1, q2, q3 = _unpack(vals, N, n_W, d, K, inc.rates, dt)
        q2 = q2.transpose(0, 2, 1)                  # (M, d, N)
        Zp[:, k], Q2[:, k] = C, q2
        if K:
            Q3[:, k] = q3

        acc = -np.einsum("mjn,mj->mn", q2, drift[:, k])
        if coeffs.V is not None:
            V = coeffs.V(k)
            contraction = dt * float(np.max(np.linalg.norm(V, 2, axis=(-2, -1))))
            if contraction >= 1.0:
                raise PicardError("explicit costate step is not contractive",
                                  contraction=contraction, step=k)
            acc += np.einsum("...nm,...m->...n", V, C)
        if coeffs.K is not None and n_tr:
            acc += np.einsum("...inm,...ni->...m", coeffs.K(k)[:, :n_tr], q1[:, :, :n_tr])
        if coeffs.E is not None:
            acc += np.einsum("...jnm,...jm->...n", coeffs.E(k), q2)
        if coeffs.E3 is not None and K:
            acc += np.einsum("k,...knm,...km->...n", inc.rates, coeffs.E3(k), q3)
        if coeffs.J is not None:
            Jk = coeffs.J(k)
            acc += Jk
            energy += dt * np.sum(Jk ** 2, axis=1)
        Z[:, k] = C + dt * acc
        if not np.all(np.isfinite(Z[:, k])):
            raise NumericalAbort("non-finite costate", step=k)

        if keep_q1:
            Q1_store[:, k] = q1
        if trace_norms:
            traces[:, k] = np.linalg.svd(q1, compute_uv=False).sum(axis=-1)
        for name, fn in (reducers or {}).items():
            reduced[name][k] = fn(k, q1)

    return BspdeSolution(Z=Z, Z_pred=Zp, Q2=Q2, Q3=Q3, truncation_n=n_tr, eta=coeffs.eta,
                         Q1=Q1_store, q1_trace=traces,
                         reductions={name: np.stack(v, axis=1) for name, v in reduced.items()},
                         forcing_energy=energy)


def assemble_P_equation(model: ModelSpec, lin: HatLinearization, bsde: BsdeSolution,
                        ell: np.ndarray, pq: BsdeSolution,
                        jets: Optional[BackwardJets] = None) -> BspdeCoeffs:
    """Costate coefficients of the direct adjoint along the reference path."""
    path = lin.path
    jets = jets or BackwardJets(model, path, bsde)
    w = model.quad_weights

    def J(k: int) -> np.ndarray:
        g, L = jets.at(k)
        h = lin.at(k).observation
        gl = np.einsum("...qan,...a->...qn", g.d_x, ell[:, k])
        run = np.einsum("q,mqn->mn", w, np.broadcast_to(L.d_x - gl, gl.shape))
        return run + np.einsum("...jn,...j->...n", h.d_x, pq.r[:, k, 0, :])

    xT = path.x[:, -1]
    f = model.terminal(xT)
    eta = model.terminal_cost(xT).d_x - np.einsum("...an,...a->...n", f.d_x, ell[:, -1])
    return BspdeCoeffs(
        eta=np.broadcast_to(eta, (path.M, model.N)).copy(),
        V=lambda k: np.swapaxes(lin.at(k).O_hat, -1, -2),
        K=lambda k: lin.at(k).noise_w.d_x,
        E=lambda k: np.swapaxes(lin.at(k).noise_b.d_x, -1, -2),
        E3=(lambda k: np.swapaxes(lin.at(k).jump.d_x, -1, -2)) if model.K else None,
        J=J,
    )


@dataclass
class TraceDiagnostic:
    statistic: float
    std_error: float
    theta: float
    reference: float            # E|eta|^2 + E sum dt |J|^2
    ratio: float


def trace_diagnostic(bspde: BspdeSolution, T: float, space: Optional[SpectralSpace] = None,
                     theta: Optional[float] = None) -> TraceDiagnostic:
    """Monte Carlo estimate of E sum_k dt (T - t_k)^{2 theta} |Q1_k|_1^2."""
    traces = bspde.q1_trace
    if traces is None and bspde.Q1 is not None:
        traces = np.linalg.svd(bspde.Q1, compute_uv=False).sum(axis=-1)
    if traces is None:
        raise InvalidArgument("trace diagnostic needs Q1 trace norms (trace_norms=True or keep_q1=True)")
    if theta is None:
        require(space is not None, "trace diagnostic needs a space or an explicit theta")
        _, theta = fit_smoothing_exponent(space)
    M, n = traces.shape
    dt = T / n
    weights = (T - dt * np.arange(n)) ** (2.0 * theta)
    per_path = dt * (traces ** 2) @ weights
    energy = bspde.forcing_energy if bspde.forcing_energy is not None else np.zeros(M)
    reference = float(np.mean(np.sum(bspde.eta ** 2, axis=1)) + np.mean(energy))
    stat = float(per_path.mean())
    return TraceDiagnostic(statistic=stat, std_error=float(per_path.std(ddof=1) / np.sqrt(M)),
                           theta=float(theta), reference=reference,
                           ratio=stat / reference if reference > 0 else float("nan"))
