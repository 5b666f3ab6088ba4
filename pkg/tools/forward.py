"""
tools/forward.py
Exponential-Euler time stepping of the forward equations in mild form:
the controlled state, generic linear equations driven by the same noise,
first variations and operator-valued flows.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from tools.errors import BudgetExceeded, InvalidArgument, NumericalAbort, ShapeError, require
from tools.models import CoefficientJet, ModelSpec
from tools.noise import NoiseBatch, TimeGrid, sample_batch
from tools.policy import PolicyEvaluator, PolicyParams

logger = logging.getLogger(__name__)

DEFAULT_FLOW_MEMORY = 512 * 2 ** 20


class Measure(str, Enum):
    P = "P_with_Y_as_BM"
    Q = "Q_u_with_B_as_BM"


class EquationForm(str, Enum):
    Y_FORM = "Y"     # martingale part written against the observation Y
    B_FORM = "B"     # martingale part written against the innovation B


@dataclass
class Increments:
    """Per-cell increments seen by one ensemble, all (M, n_steps, .)."""
    dW: np.ndarray
    dY: np.ndarray
    dB: np.ndarray
    counts: np.ndarray
    rates: np.ndarray
    dt: float
    h: np.ndarray               # observation drift of the simulated state
    obs_drift: np.ndarray       # E[dY | F_k] / dt under the sampling measure

    @property
    def dN(self) -> np.ndarray:
        return self.counts - self.rates * self.dt

    def drift_for(self, form: EquationForm) -> np.ndarray:
        """Sampling-measure drift of the increment an equation of `form` integrates against."""
        if form == EquationForm.Y_FORM:
            return self.obs_drift
        return self.obs_drift - self.h

    def martingale_increment(self, form: EquationForm) -> np.ndarray:
        """Centred increment for regression: dY - E[dY|F] dt (equal for both forms)."""
        return self.dY - self.obs_drift * self.dt


@dataclass
class ForwardPath:
    grid: TimeGrid
    measure: Measure
    x: np.ndarray               # (M, n+1, N)
    u: np.ndarray               # (M, n, c)
    Y: np.ndarray               # (M, n+1, d)
    qv: np.ndarray              # (M, n+1, d)
    increments: Increments
    phi: Optional[np.ndarray] = None       # (M, n, n_features) policy features
    active: Optional[np.ndarray] = None    # (M, n, c) box constraint not binding
    noise: Optional[NoiseBatch] = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.x.shape[0]

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def states(self) -> np.ndarray:
        return self.x

    @property
    def h(self) -> np.ndarray:
        return self.increments.h

    def regression_features(self, k: int) -> np.ndarray:
        return np.hstack([self.x[:, k], self.Y[:, k]])


def _step_state(model: ModelSpec, decay: np.ndarray, dt: float, t: float, x: np.ndarray,
                u: np.ndarray, h: np.ndarray, dW: np.ndarray, dY: np.ndarray,
                dN: np.ndarray) -> np.ndarray:
    F = model.drift(t, x, u, derivatives=False).value
    G1 = model.noise_w(t, x, u, derivatives=False).value
    G2 = model.noise_b(t, x, u, derivatives=False).value
    incr = (F - np.einsum("mjn,mj->mn", G2, h)) * dt
    incr += np.einsum("mni,mi->mn", G1, dW)
    incr += np.einsum("mjn,mj->mn", G2, dY)
    if model.K:
        Th = model.jump(t, x, u, derivatives=False).value
        incr += np.einsum("mkn,mk->mn", Th, dN)
    return decay * (x + incr)


def simulate_forward(
    model: ModelSpec,
    policy: Optional[PolicyParams],
    batch: NoiseBatch,
    x0: Optional[np.ndarray] = None,
    measure: Measure = Measure.Q,
    controls: Optional[np.ndarray] = None,
    observation: Optional[np.ndarray] = None,
    obs_drift: Optional[np.ndarray] = None,
    restart: Optional[tuple[ForwardPath, int]] = None,
) -> tuple[ForwardPath, np.ndarray]:
    """Simulate the controlled state on an ensemble; returns (path, Y).

    Under P the dB columns of the batch are the observation increments. Under
    Q they are the innovation and dY = h dt + dB. A fixed `observation` array
    overrides both (dY given, obs_drift defaults to 0). `controls` replaces the
    policy output; `restart=(base, s)` copies base up to step s and continues.
    """
    grid = batch.grid
    n, dt, M = grid.n_steps, grid.dt, batch.M
    N, c, d = model.N, model.control_dim, model.d
    if batch.d != d or batch.n_W != model.n_W or batch.jm.K != model.K:
        raise ShapeError(f"noise batch (n_W={batch.n_W}, d={batch.d}, K={batch.jm.K}) does not "
                         f"match model (n_W={model.n_W}, d={d}, K={model.K})")
    if controls is None and policy is None:
        raise InvalidArgument("simulate_forward needs a policy or explicit controls")
    if controls is not None and controls.shape != (M, n, c):
        raise ShapeError(f"controls must be {(M, n, c)}, got {controls.shape}")
    if observation is not None and observation.shape != (M, n, d):
        raise ShapeError(f"observation must be {(M, n, d)}, got {observation.shape}")

    decay = model.space.decay(dt)
    evaluator = (PolicyEvaluator(policy, model.box_lo, model.box_hi, n, dt)
                 if policy is not None else None)

    x = np.empty((M, n + 1, N))
    Y = np.empty((M, n + 1, d))
    qv = np.empty((M, n + 1, d))
    u = np.empty((M, n, c))
    h = np.empty((M, n, d))
    dY = np.empty((M, n, d))
    dB = np.empty((M, n, d))
    drift = np.zeros((M, n, d))
    n_f = policy.n_features if policy is not None else 0
    phi = np.zeros((M, n, n_f))
    active = np.ones((M, n, c), dtype=bool)

    start = 0
    if restart is not None:
        base, start = restart
        require(0 <= start <= n, f"restart step {start} outside [0, {n}]")
        x[:, :start + 1] = base.x[:, :start + 1]
        Y[:, :start + 1] = base.Y[:, :start + 1]
        qv[:, :start + 1] = base.qv[:, :start + 1]
        for dst, src in ((u, base.u), (h, base.h), (dY, base.increments.dY),
                         (dB, base.increments.dB), (drift, base.increments.obs_drift)):
            dst[:, :start] = src[:, :start]
        if base.phi is not None and n_f:
            phi[:, :start] = base.phi[:, :start]
            active[:, :start] = base.active[:, :start]
    else:
        x[:, 0] = model.x0 if x0 is None else x0
        Y[:, 0] = 0.0
        qv[:, 0] = 0.0

    dN = batch.compensated
    for k in range(start, n):
        t = k * dt
        if controls is not None:
            u[:, k] = controls[:, k]
        else:
            ps = evaluator.step(k, Y[:, k], qv[:, k])
            u[:, k], phi[:, k], active[:, k] = ps.u, ps.phi, ps.active
        h[:, k] = model.observation(t, x[:, k], u[:, k], derivatives=False).value
        if observation is not None:
            dY[:, k] = observation[:, k]
            dB[:, k] = dY[:, k] - h[:, k] * dt
            if obs_drift is not None:
                drift[:, k] = obs_drift[:, k]
        elif measure == Measure.P:
            dY[:, k] = batch.dB[:, k]
            dB[:, k] = dY[:, k] - h[:, k] * dt
        else:
            dB[:, k] = batch.dB[:, k]
            dY[:, k] = h[:, k] * dt + dB[:, k]
            drift[:, k] = h[:, k]

        x[:, k + 1] = _step_state(model, decay, dt, t, x[:, k], u[:, k], h[:, k],
                                  batch.dW[:, k], dY[:, k], dN[:, k])
        if not np.all(np.isfinite(x[:, k + 1])):
            raise NumericalAbort("non-finite state in forward simulation", step=k)
        Y[:, k + 1] = Y[:, k] + dY[:, k]
        qv[:, k + 1] = qv[:, k] + dY[:, k] ** 2

    inc = Increments(dW=batch.dW, dY=dY, dB=dB, counts=batch.counts, rates=batch.jm.rates,
                     dt=dt, h=h, obs_drift=drift)
    path = ForwardPath(grid=grid, measure=measure, x=x, u=u, Y=Y, qv=qv, increments=inc,
                       phi=phi if n_f else None, active=active, noise=batch)
    return path, Y


# ================================================================== #
#  Linearization along a reference path                              #
# ================================================================== #

@dataclass
class StepJets:
    drift: CoefficientJet
    noise_w: CoefficientJet
    noise_b: CoefficientJet
    jump: CoefficientJet
    observation: CoefficientJet
    O_hat: np.ndarray           # (., N, N)  F_x - G2_j (x) h_{j,x}
    R_hat: np.ndarray           # (., N, c)  F_u - G2_j (x) h_{j,u}


class HatLinearization:
    """Coefficient jets along a reference path, evaluated lazily per step."""

    def __init__(self, model: ModelSpec, path: ForwardPath):
        self.model = model
        self.path = path
        self._cached_k: Optional[int] = None
        self._cached: Optional[StepJets] = None

    def at(self, k: int) -> StepJets:
        if k == self._cached_k:
            return self._cached
        m, p = self.model, self.path
        t, x, u = k * p.grid.dt, p.x[:, k], p.u[:, k]
        F = m.drift(t, x, u)
        G1 = m.noise_w(t, x, u)
        G2 = m.noise_b(t, x, u)
        Th = m.jump(t, x, u)
        h = m.observation(t, x, u)
        O_hat = F.d_x - np.einsum("...jn,...jb->...nb", G2.value, h.d_x)
        R_hat = F.d_u - np.einsum("...jn,...jc->...nc", G2.value, h.d_u)
        self._cached_k = k
        self._cached = StepJets(F, G1, G2, Th, h, O_hat, R_hat)
        return self._cached

    def homogeneous_coeffs(self, k_truncation: Optional[int] = None) -> "LinearSpdeCoeffs":
        return LinearSpdeCoeffs(
            q1=lambda k: self.at(k).O_hat,
            k_ops=lambda k: self.at(k).noise_w.d_x,
            q2=lambda k: self.at(k).noise_b.d_x,
            q3=(lambda k: self.at(k).jump.d_x) if self.model.K else None,
            k_truncation=k_truncation,
        )

    def first_variation_coeffs(self, v: np.ndarray) -> "LinearSpdeCoeffs":
        """Coefficients of the first-variation equation in direction v (M, n, c)."""
        base = self.homogeneous_coeffs()
        base.r_dag = lambda k: np.einsum("...nc,...c->...n", self.at(k).R_hat, v[:, k])
        base.gamma_dag = lambda k: np.einsum("...inc,...c->...ni", self.at(k).noise_w.d_u, v[:, k])
        base.r2 = lambda k: np.einsum("...jnc,...c->...jn", self.at(k).noise_b.d_u, v[:, k])
        if self.model.K:
            base.r3 = lambda k: np.einsum("...knc,...c->...kn", self.at(k).jump.d_u, v[:, k])
        return base


# ================================================================== #
#  Generic linear equations                                          #
# ================================================================== #

Coefficient = Optional[Callable[[int], np.ndarray]]


@dataclass
class LinearSpdeCoeffs:
    """Step-indexed coefficients; any entry left as None is zero.

    q1 (.,N,N); k_ops (.,n_W,N,N); q2 (.,d,N,N); q3 (.,K,N,N);
    r_dag (.,N); gamma_dag (.,N,n_W) with column i = Gamma e_i;
    r2 (.,d,N); r3 (.,K,N); chi (.,N).
    """
    q1: Coefficient = None
    k_ops: Coefficient = None
    q2: Coefficient = None
    q3: Coefficient = None
    r_dag: Coefficient = None
    gamma_dag: Coefficient = None
    r2: Coefficient = None
    r3: Coefficient = None
    chi: Coefficient = None
    k_truncation: Optional[int] = None
    chi_truncation: int = 0
    norm_bound: float = 1e8


@dataclass
class LinearPath:
    states: np.ndarray          # (M, n+1, N) or (M, n+1, N, p); zero before s_index
    s_index: int
    k_truncation: int
    chi_truncation: int


def _checked(coef: Coefficient, k: int, bound: float, name: str) -> Optional[np.ndarray]:
    if coef is None:
        return None
    a = np.asarray(coef(k))
    if not np.all(np.isfinite(a)) or (a.size and np.max(np.abs(a)) > bound):
        raise InvalidArgument(f"coefficient {name} unbounded or non-finite at step {k}")
    return a


def simulate_linear_spde(coeffs: LinearSpdeCoeffs, inc: Increments, decay: np.ndarray,
                         y0: np.ndarray, s_index: int = 0) -> LinearPath:
    """Exponential-Euler solution from y0 at step s_index.

    y0 may be (N,), (M, N) or a matrix state (M, N, p) whose columns are
    propagated together.
    """
    M, n, n_W = inc.dW.shape
    N = decay.shape[0]
    require(0 <= s_index < n, f"s_index must lie in [0, {n}), got {s_index}")
    n_tr = n_W if coeffs.k_truncation is None else coeffs.k_truncation
    m_tr = coeffs.chi_truncation
    require(0 <= n_tr <= n_W and 0 <= m_tr <= n_W,
            f"truncations (n={n_tr}, m={m_tr}) must lie in [0, n_W={n_W}]")

    y0 = np.asarray(y0, dtype=float)
    matrix_state = y0.ndim == 3
    if matrix_state:
        Yk = np.array(np.broadcast_to(y0, (M, N, y0.shape[2])))
    else:
        Yk = np.array(np.broadcast_to(y0, (M, N)))[:, :, None]
    p = Yk.shape[2]
    states = np.zeros((M, n + 1, N, p))
    states[:, s_index] = Yk
    dN = inc.dN
    bound = coeffs.norm_bound
    dec = decay[None, :, None]

    for k in range(s_index, n):
        dbeta, dB = inc.dW[:, k], inc.dB[:, k]
        acc = Yk.copy()
        Q1 = _checked(coeffs.q1, k, bound, "Q1")
        if Q1 is not None:
            acc += inc.dt * (Q1 @ Yk)
        R = _checked(coeffs.r_dag, k, bound, "R_dag")
        if R is not None:
            acc += inc.dt * np.broadcast_to(R, (M, N))[:, :, None]

        Kops = _checked(coeffs.k_ops, k, bound, "K")
        if Kops is not None and n_tr:
            acc += np.einsum("...inm,...i->...nm", Kops[:, :n_tr], dbeta[:, :n_tr]) @ Yk
        chi = _checked(coeffs.chi, k, bound, "chi")
        if chi is not None and Kops is not None and m_tr:
            acc += np.einsum("...inm,...m,...i->...n", Kops[:, :m_tr], chi, dbeta[:, :m_tr])[:, :, None]
        Gd = _checked(coeffs.gamma_dag, k, bound, "Gamma_dag")
        if Gd is not None:
            acc += np.einsum("...ni,...i->...n", Gd, dbeta)[:, :, None]

        Q2 = _checked(coeffs.q2, k, bound, "Q2")
        if Q2 is not None:
            acc += np.einsum("...jnm,...j->...nm", Q2, dB) @ Yk
        R2 = _checked(coeffs.r2, k, bound, "R2")
        if R2 is not None:
            acc += np.einsum("...jn,...j->...n", R2, dB)[:, :, None]

        if dN.shape[2]:
            Q3 = _checked(coeffs.q3, k, bound, "Q3")
            if Q3 is not None:
                acc += np.einsum("...knm,...k->...nm", Q3, dN[:, k]) @ Yk
            R3 = _checked(coeffs.r3, k, bound, "R3")
            if R3 is not None:
                acc += np.einsum("...kn,...k->...n", R3, dN[:, k])[:, :, None]

        Yk = dec * acc
        if not np.all(np.isfinite(Yk)):
            raise NumericalAbort("non-finite state in linear equation", step=k)
        states[:, k + 1] = Yk

    if not matrix_state:
        states = states[..., 0]
    return LinearPath(states=states, s_index=s_index, k_truncation=n_tr, chi_truncation=m_tr)


def simulate_first_variation(model: ModelSpec, hat_path: ForwardPath, v: np.ndarray,
                             lin: Optional[HatLinearization] = None) -> LinearPath:
    """x^1 with x^1_0 = 0 for control direction v (M, n, c) along hat_path."""
    if v.shape != hat_path.u.shape:
        raise ShapeError(f"direction shape {v.shape} does not match controls {hat_path.u.shape}")
    lin = lin or HatLinearization(model, hat_path)
    return simulate_linear_spde(lin.first_variation_coeffs(v), hat_path.increments,
                                model.space.decay(hat_path.grid.dt), np.zeros(model.N))


def simulate_homogeneous(model: ModelSpec, hat_path: ForwardPath, x_s: np.ndarray, s_index: int,
                         lin: Optional[HatLinearization] = None) -> LinearPath:
    lin = lin or HatLinearization(model, hat_path)
    return simulate_linear_spde(lin.homogeneous_coeffs(), hat_path.increments,
                                model.space.decay(hat_path.grid.dt), x_s, s_index)


@dataclass
class FlowOperatorPath:
    ops: np.ndarray             # (M, n+1, N, N); identity at s_index, zero before
    s_index: int

    def apply(self, k: int, x: np.ndarray) -> np.ndarray:
        ops = self.ops[:, k]
        return np.einsum("mab,mb->ma", ops, np.broadcast_to(x, ops.shape[:2]))


def simulate_flow(model: ModelSpec, hat_path: ForwardPath, s_index: int,
                  lin: Optional[HatLinearization] = None,
                  memory_cap: int = DEFAULT_FLOW_MEMORY) -> FlowOperatorPath:
    M, N, n = hat_path.M, model.N, hat_path.n_steps
    need = M * (n + 1) * N * N * 8
    if need > memory_cap:
        raise BudgetExceeded(f"flow from step {s_index} needs {need} bytes, cap is {memory_cap}",
                             requested=need, budget=memory_cap)
    eye = np.broadcast_to(np.eye(N), (M, N, N))
    out = simulate_homogeneous(model, hat_path, eye, s_index, lin)
    return FlowOperatorPath(ops=out.states, s_index=s_index)


@dataclass
class MomentRow:
    n_steps: int
    sup_second_moment: float
    std_error: float


def moment_profile(model: ModelSpec, policy: PolicyParams, grid: TimeGrid, M: int, seed: int,
                   levels: int = 3) -> list[MomentRow]:
    """sup_k E|x_k|^2 on grids with dt halved `levels - 1` times."""
    require(levels >= 1, f"levels must be at least 1, got {levels}")
    rows = []
    for level in range(levels):
        g = TimeGrid(T=grid.T, n_steps=grid.n_steps * 2 ** level, t0=grid.t0)
        batch = sample_batch(g, model.n_W, model.d, model.jm, seed, M)
        path, _ = simulate_forward(model, policy, batch, measure=Measure.Q)
        sq = np.sum(path.x ** 2, axis=2)
        k = int(np.argmax(sq.mean(axis=0)))
        rows.append(MomentRow(n_steps=g.n_steps, sup_second_moment=float(sq[:, k].mean()),
                              std_error=float(sq[:, k].std(ddof=1) / np.sqrt(M))))
        logger.debug("moment profile n=%d: sup E|x|^2 = %.6g", g.n_steps, rows[-1].sup_second_moment)
    return rows
