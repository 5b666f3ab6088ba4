"""
tools/malliavin.py
Discrete Malliavin calculus on the simulation noise and the maximum
principle assembled from it.

Gaussian derivatives are central differences in one increment slot, read
as the derivative over the whole cell; Poisson derivatives add one jump to
a cell. Because the LSMC decision rules of the reference BSDE are kept,
ell, Pi and aleph are pure functions of the noise and can be resimulated
after any bump.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np

from tools.backward import BackwardJets, BsdeSolution, replay_bsde, solve_ell
from tools.errors import BudgetExceeded, InvalidArgument, NumericalAbort, require
from tools.forward import ForwardPath, HatLinearization, Measure, simulate_flow, simulate_forward
from tools.models import ModelSpec
from tools.noise import NoiseBatch, NoiseGrid, NoisePerturbation, apply_perturbation
from tools.policy import PolicyParams
from tools.smp import HatEnsemble, SmpGradient, gradient_from_bracket, STATIONARY_SE

logger = logging.getLogger(__name__)

BUMP_SCALE = 1e-4
DEFAULT_BUDGET = 200_000

Noise = Union[NoiseGrid, NoiseBatch]


# ================================================================== #
#  Path functionals and derivative operators                         #
# ================================================================== #

class CostClass(str, Enum):
    CHEAP = "cheap"
    FULL = "full"


@dataclass
class PathFunctional:
    """A deterministic map from driving noise to a value (per path on a batch)."""
    fn: Callable[[Noise], np.ndarray]
    cost: CostClass = CostClass.FULL
    name: str = ""

    def __call__(self, noise: Noise) -> np.ndarray:
        return np.asarray(self.fn(noise), dtype=float)


def _as_batch(noise: Noise) -> NoiseBatch:
    return NoiseBatch.from_grids([noise]) if isinstance(noise, NoiseGrid) else noise


class ForwardFunctional(PathFunctional):
    """f(x_j) of the controlled state, resimulated from the noise.

    On a NoiseGrid the value of the single path is returned.
    """

    def __init__(self, model: ModelSpec, policy: Optional[PolicyParams],
                 f: Callable[[np.ndarray], np.ndarray], step: Optional[int] = None,
                 measure: Measure = Measure.Q, name: str = ""):
        self.model = model
        self.policy = policy
        self.f = f
        self.step = step
        self.measure = measure
        super().__init__(fn=self._evaluate, cost=CostClass.FULL, name=name or "f(x)")

    def path(self, noise: Noise, restart: Optional[tuple[ForwardPath, int]] = None) -> ForwardPath:
        path, _ = simulate_forward(self.model, self.policy, _as_batch(noise),
                                   measure=self.measure, restart=restart)
        return path

    def of_path(self, path: ForwardPath) -> np.ndarray:
        return np.asarray(self.f(path.x[:, -1 if self.step is None else self.step]), dtype=float)

    def _evaluate(self, noise: Noise, restart=None) -> np.ndarray:
        out = self.of_path(self.path(noise, restart))
        return out[0] if isinstance(noise, NoiseGrid) else out


def _default_bump(noise: Noise) -> float:
    return BUMP_SCALE * np.sqrt(noise.grid.dt)


def _bump(noise: Noise, stream: str, step: int, index: int, h: float) -> Noise:
    if isinstance(noise, NoiseGrid):
        p = (NoisePerturbation.gaussian_W(step, index, h) if stream == "W"
             else NoisePerturbation.gaussian_B(step, index, h))
        return apply_perturbation(noise, p)
    return noise.bump_W(step, index, h) if stream == "W" else noise.bump_B(step, index, h)


def _central(fn: PathFunctional, noise: Noise, stream: str, step: int, index: int,
             h: Optional[float]) -> np.ndarray:
    h = _default_bump(noise) if h is None else h
    require(h > 0, f"bump must be positive, got {h}")
    n = noise.grid.n_steps
    require(0 <= step < n, f"step {step} outside [0, {n})")
    diff = (fn(_bump(noise, stream, step, index, h)) - fn(_bump(noise, stream, step, index, -h))) / (2 * h)
    if not np.all(np.isfinite(diff)):
        raise NumericalAbort(f"non-finite {stream} derivative", step=step)
    return diff


def malliavin_W(fn: PathFunctional, noise: Noise, step: int, mode: int,
                h: Optional[float] = None) -> np.ndarray:
    """D^W in mode `mode` over cell `step`: d fn / d dW[step, mode]."""
    return _central(fn, noise, "W", step, mode, h)


def malliavin_B(fn: PathFunctional, noise: Noise, step: int, comp: int,
                h: Optional[float] = None) -> np.ndarray:
    return _central(fn, noise, "B", step, comp, h)


def malliavin_N(fn: PathFunctional, noise: Noise, time: float, mark: int) -> np.ndarray:
    """fn(noise + one jump of `mark` at `time`) - fn(noise)."""
    grid = noise.grid
    if not grid.t0 < time <= grid.t0 + grid.T:
        raise InvalidArgument(f"jump time {time} outside (t0, T]")
    if isinstance(noise, NoiseGrid):
        added = apply_perturbation(noise, NoisePerturbation.add_jump(time, mark))
    else:
        require(0 <= mark < noise.jm.K, f"mark index {mark} out of range for K={noise.jm.K}")
        added = noise.add_jump(int(grid.cell_of(time)), mark)
    return fn(added) - fn(noise)


# ------------------------------------------------------------------ #
#  Integration-by-parts checks                                       #
# ------------------------------------------------------------------ #

@dataclass
class IbpCheck:
    identity: str
    lhs: float
    rhs: float
    residual: float
    std_error: float
    passed: bool

    def to_dict(self) -> dict:
        return {"identity": self.identity, "lhs": self.lhs, "rhs": self.rhs,
                "residual": self.residual, "std_error": self.std_error, "passed": self.passed}


def _ibp(identity: str, lhs: np.ndarray, rhs: np.ndarray, n_se: float) -> IbpCheck:
    D = lhs - rhs
    se = float(D.std(ddof=1) / np.sqrt(D.shape[0]))
    resid = float(D.mean())
    check = IbpCheck(identity=identity, lhs=float(lhs.mean()), rhs=float(rhs.mean()),
                     residual=resid, std_error=se, passed=abs(resid) <= n_se * se + 1e-12)
    logger.info("%s duality: residual %.3e +- %.2e", identity, resid, se)
    return check


def gaussian_duality(fn: PathFunctional, batch: NoiseBatch, weight: np.ndarray,
                     stream: str = "W", bump: float = BUMP_SCALE,
                     n_se: float = STATIONARY_SE) -> IbpCheck:
    """E[F sum_k weight_k . dW_k] = E[sum_k dt weight_k . D_k F].

    `weight` (M, n, n_W or d) must not depend on the increment of its own
    cell or later ones. The right side is one directional derivative along
    dt * weight, with the weight held fixed.
    """
    incr = batch.dW if stream == "W" else batch.dB
    if weight.shape != incr.shape:
        raise InvalidArgument(f"weight must be {incr.shape}, got {weight.shape}")
    dt = batch.grid.dt
    F = fn(batch)
    lhs = F * np.einsum("mki,mki->m", weight, incr)
    eps = bump / np.sqrt(dt)
    shift = eps * dt * weight
    if stream == "W":
        plus, minus = batch.shift(dW=shift), batch.shift(dW=-shift)
    else:
        plus, minus = batch.shift(dB=shift), batch.shift(dB=-shift)
    rhs = (fn(plus) - fn(minus)) / (2 * eps)
    return _ibp(f"gaussian_{stream}", lhs, rhs, n_se)


def poisson_duality(fn: ForwardFunctional, batch: NoiseBatch, psi: np.ndarray,
                    n_se: float = STATIONARY_SE) -> IbpCheck:
    """E[F sum psi . (dN - pi dt)] = E[sum_k sum_m pi_m dt psi_km (F(+jump at k, m) - F)].

    `psi` (M, n, K) must be predictable. Each added jump resimulates from its cell.
    """
    require(batch.jm.K > 0, "Poisson duality needs at least one mark")
    if psi.shape != batch.counts.shape:
        raise InvalidArgument(f"psi must be {batch.counts.shape}, got {psi.shape}")
    dt, rates = batch.grid.dt, batch.jm.rates
    base = fn.path(batch)
    F = fn.of_path(base)
    lhs = F * np.einsum("mkq,mkq->m", psi, batch.compensated)
    rhs = np.zeros(batch.M)
    for k in range(batch.grid.n_steps):
        for q in range(batch.jm.K):
            Fq = fn.of_path(fn.path(batch.add_jump(k, q), restart=(base, k)))
            rhs += rates[q] * dt * psi[:, k, q] * (Fq - F)
    return _ibp("poisson", lhs, rhs, n_se)


def adaptedness_defect(model: ModelSpec, policy: PolicyParams, batch: NoiseBatch, step: int,
                       h: Optional[float] = None) -> float:
    """Largest change of x_0..x_step under bumps of cell `step` (all streams)."""
    h = _default_bump(batch) if h is None else h
    base, _ = simulate_forward(model, policy, batch, measure=Measure.Q)
    worst = 0.0
    bumped = ([batch.bump_W(step, i, h) for i in range(batch.n_W)]
              + [batch.bump_B(step, j, h) for j in range(batch.d)]
              + [batch.add_jump(step, q) for q in range(batch.jm.K)])
    for noise in bumped:
        path, _ = simulate_forward(model, policy, noise, measure=Measure.Q)
        worst = max(worst, float(np.max(np.abs(path.x[:, :step + 1] - base.x[:, :step + 1]))))
    return worst


def chain_rule_defect(model: ModelSpec, policy: PolicyParams, batch: NoiseBatch,
                      f: Callable[[np.ndarray], np.ndarray],
                      grad_f: Callable[[np.ndarray], np.ndarray],
                      step: int, mode: int, h: Optional[float] = None) -> float:
    """Relative gap between D^W f(x_T) and grad f(x_T) . D^W x_T."""
    F = ForwardFunctional(model, policy, f)
    X = ForwardFunctional(model, policy, lambda x: x)
    DF = malliavin_W(F, batch, step, mode, h)
    DX = malliavin_W(X, batch, step, mode, h)
    xT = X(batch)
    chained = np.einsum("mn,mn->m", grad_f(xT), DX)
    return float(np.max(np.abs(DF - chained)) / (1.0 + np.max(np.abs(chained))))


# ================================================================== #
#  Replaying the reference adjoints on perturbed noise               #
# ================================================================== #

@dataclass
class ReplayState:
    """Reference quantities on one noise ensemble; Pi and aleph are valid from `start` on."""
    noise: NoiseBatch
    path: ForwardPath
    bsde: BsdeSolution
    ell: np.ndarray             # (M, n+1, D)
    Pi: np.ndarray              # (M, n+1, N)
    aleph: np.ndarray           # (M, n+1)
    start: int = 0


class HatReplayer:
    """Resimulates x, (y, z, r, gamma), ell, Pi and aleph after a noise bump at cell k."""

    def __init__(self, hat: HatEnsemble, bump_scale: float = BUMP_SCALE,
                 budget: int = DEFAULT_BUDGET):
        self.hat = hat
        self.model = hat.model
        self.decay = hat.decay
        self.dt = hat.dt
        self.h = bump_scale * np.sqrt(self.dt)
        self.budget = budget
        self.replays = 0
        self._lock = threading.Lock()
        Pi, aleph = self._tails(hat.path, hat.bsde, hat.ell, hat.jets, 0)
        self.base = ReplayState(noise=hat.batch, path=hat.path, bsde=hat.bsde, ell=hat.ell,
                                Pi=Pi, aleph=aleph, start=0)

    def _tails(self, path: ForwardPath, bsde: BsdeSolution, ell: np.ndarray,
               jets: BackwardJets, start: int) -> tuple[np.ndarray, np.ndarray]:
        model, n, M = self.model, path.n_steps, path.M
        w = model.quad_weights
        Pi = np.zeros((M, n + 1, model.N))
        aleph = np.zeros((M, n + 1))
        xT = path.x[:, -1]
        phi, f = model.terminal_cost(xT), model.terminal(xT)
        Pi[:, n] = phi.d_x - np.einsum("...an,...a->...n", f.d_x, ell[:, n])
        aleph[:, n] = phi.value
        for k in range(n - 1, start - 1, -1):
            _, L = jets.at(k)
            Pi[:, k] = self.decay * Pi[:, k + 1] + self.dt * np.einsum("q,...qn->...n", w, L.d_x)
            aleph[:, k] = aleph[:, k + 1] + self.dt * (L.value @ w)
        return Pi, aleph

    def replay(self, noise: NoiseBatch, start: int, base: Optional[ReplayState] = None) -> ReplayState:
        base = base or self.base
        with self._lock:
            self.replays += 1
            if self.replays > self.budget:
                raise BudgetExceeded(f"resimulation budget of {self.budget} exhausted",
                                     requested=self.replays, budget=self.budget)
        model, hat = self.model, self.hat
        path, _ = simulate_forward(model, hat.policy, noise, measure=Measure.Q,
                                   restart=(base.path, start))
        bsde = replay_bsde(model, hat.bsde, path, start=start, base=base.bsde)
        jets = BackwardJets(model, path, bsde)
        ell = solve_ell(model, path, bsde, jets, start=start, base=base.ell)
        Pi, aleph = self._tails(path, bsde, ell, jets, start)
        return ReplayState(noise=noise, path=path, bsde=bsde, ell=ell, Pi=Pi, aleph=aleph, start=start)


@dataclass(frozen=True)
class SlotPlan:
    """Noise slots whose derivatives enter through a non-zero coefficient."""
    w_modes: tuple[int, ...]
    b_comps: tuple[int, ...]
    marks: tuple[int, ...]

    @property
    def size(self) -> int:
        return 2 * len(self.w_modes) + 2 * len(self.b_comps) + len(self.marks)


def _nonzero(arr: np.ndarray, axis: int) -> set[int]:
    moved = np.moveaxis(np.asarray(arr), axis, 0)
    return {i for i in range(moved.shape[0]) if np.any(moved[i] != 0)}


def plan_slots(hat: HatEnsemble) -> tuple[SlotPlan, SlotPlan]:
    """(x-side, u-side) active slots over the whole reference path."""
    wx, bx, nx, wu, bu, nu = (set() for _ in range(6))
    for k in range(hat.path.n_steps):
        st = hat.lin.at(k)
        wx |= _nonzero(st.noise_w.d_x, 1)
        wu |= _nonzero(st.noise_w.d_u, 1)
        bx |= _nonzero(st.noise_b.d_x, 1) | _nonzero(st.observation.d_x, 1)
        bu |= _nonzero(st.noise_b.d_u, 1) | _nonzero(st.observation.d_u, 1)
        if hat.model.K:
            nx |= _nonzero(st.jump.d_x, 1)
            nu |= _nonzero(st.jump.d_u, 1)
    x_side = SlotPlan(tuple(sorted(wx)), tuple(sorted(bx)), tuple(sorted(nx)))
    u_side = SlotPlan(tuple(sorted(wu)), tuple(sorted(bu)), tuple(sorted(nu)))
    return x_side, u_side


def hamiltonian_gradient(replayer: HatReplayer, state: ReplayState, k: int,
                         slots: SlotPlan) -> np.ndarray:
    """x-gradient of the Hamiltonian at step k on `state`, (M, N).

    O^T Pi~ + K_i^T D^W Pi~ + G2_x^T D^B Pi~ + pi Theta_x^T D^N Pi~
    + h_x^T D^B aleph - w g_x^T ell, with Pi~ = e^{dtA*} Pi_{k+1}.
    """
    require(k >= state.start, f"step {k} precedes the replay start {state.start}")
    model, dec, h = replayer.model, replayer.decay, replayer.h
    st = HatLinearization(model, state.path).at(k)
    g, _ = BackwardJets(model, state.path, state.bsde).at(k)
    pt = dec * state.Pi[:, k + 1]
    H = np.einsum("...nm,...n->...m", st.O_hat, pt)
    H = H - np.einsum("q,...qan,...a->...n", model.quad_weights, g.d_x, state.ell[:, k])
    noise = state.noise
    for i in slots.w_modes:
        sp = replayer.replay(noise.bump_W(k, i, h), k, state)
        sm = replayer.replay(noise.bump_W(k, i, -h), k, state)
        D = dec * (sp.Pi[:, k + 1] - sm.Pi[:, k + 1]) / (2 * h)
        H = H + np.einsum("...nm,...n->...m", st.noise_w.d_x[:, i], D)
    for j in slots.b_comps:
        sp = replayer.replay(noise.bump_B(k, j, h), k, state)
        sm = replayer.replay(noise.bump_B(k, j, -h), k, state)
        D = dec * (sp.Pi[:, k + 1] - sm.Pi[:, k + 1]) / (2 * h)
        Da = (sp.aleph[:, k] - sm.aleph[:, k]) / (2 * h)
        H = H + np.einsum("...nm,...n->...m", st.noise_b.d_x[:, j], D)
        H = H + st.observation.d_x[:, j] * Da[:, None]
    rates = model.jm.rates
    for q in slots.marks:
        sa = replayer.replay(noise.add_jump(k, q), k, state)
        D = dec * (sa.Pi[:, k + 1] - state.Pi[:, k + 1])
        H = H + rates[q] * np.einsum("...nm,...n->...m", st.jump.d_x[:, q], D)
    return np.broadcast_to(H, (state.path.M, model.N)).copy()


def transported_costate(replayer: HatReplayer, state: ReplayState, anchor: int, slots: SlotPlan,
                        grad_H: Optional[np.ndarray] = None) -> np.ndarray:
    """M_a = Pi_a + sum_{k >= a} dt Phi(k, a)^T gradH_k by the backward recursion

    G_k = dt H_k + T_k^T G_{k+1}, T_k the one-step map of the linearized state.
    """
    model, dec, dt = replayer.model, replayer.decay, replayer.dt
    path, inc = state.path, state.path.increments
    n = path.n_steps
    lin = HatLinearization(model, path)
    G = np.zeros((path.M, model.N))
    for k in range(n - 1, anchor - 1, -1):
        Hk = grad_H[:, k] if grad_H is not None else hamiltonian_gradient(replayer, state, k, slots)
        st = lin.at(k)
        SG = dec * G
        TG = (SG + dt * np.einsum("...nm,...n->...m", st.O_hat, SG)
              + np.einsum("...inm,...i,...n->...m", st.noise_w.d_x, inc.dW[:, k], SG)
              + np.einsum("...jnm,...j,...n->...m", st.noise_b.d_x, inc.dB[:, k], SG))
        if model.K:
            TG = TG + np.einsum("...qnm,...q,...n->...m", st.jump.d_x, inc.dN[:, k], SG)
        G = dt * Hk + TG
    return state.Pi[:, anchor] + G


# ================================================================== #
#  Assembly                                                          #
# ================================================================== #

@dataclass
class MalliavinSmpBundle:
    Pi: np.ndarray                  # (M, n+1, N)
    aleph: np.ndarray               # (M, n+1)
    grad_H: np.ndarray              # (M, n, N)
    eval_steps: list[int]
    weights: np.ndarray             # (n,) quadrature weight of each evaluation step
    bracket: np.ndarray             # (M, n, c), zero off the evaluation steps
    Psi: dict = field(default_factory=dict)         # s -> (M, n, N) Psi(t_k, s+1)
    M: dict = field(default_factory=dict)           # s -> (M, N) M_{s+1}
    N1: dict = field(default_factory=dict)          # s -> (M, n_W, N)
    N2: dict = field(default_factory=dict)          # s -> (M, d, N)
    N3: dict = field(default_factory=dict)          # s -> (M, K, N)
    D_aleph_B: dict = field(default_factory=dict)   # s -> (M, d)
    identity_defect: float = 0.0
    replays: int = 0

    def construction_defect(self, dt: float) -> float:
        """max |M_{s+1} - Pi_{s+1} - sum_{k > s} Psi(t_k, s+1) dt| over evaluation steps."""
        worst = 0.0
        for s in self.eval_steps:
            rebuilt = self.Pi[:, s + 1] + dt * self.Psi[s][:, s + 1:].sum(axis=1)
            worst = max(worst, float(np.max(np.abs(self.M[s] - rebuilt))))
        return worst


def planned_replays(n: int, eval_steps: list[int], x_side: SlotPlan, u_side: SlotPlan) -> int:
    total = n * x_side.size
    for s in eval_steps:
        total += u_side.size * (1 + (n - s - 1) * x_side.size)
    return total


def _evaluation_weights(eval_steps: list[int], n: int, dt: float) -> np.ndarray:
    wk = np.zeros(n)
    bounds = list(eval_steps) + [n]
    for a, b in zip(bounds, bounds[1:]):
        wk[a] = (b - a) * dt
    return wk


def assemble_malliavin_smp(hat: HatEnsemble, stride: int = 1, bump_scale: float = BUMP_SCALE,
                           budget: int = DEFAULT_BUDGET, threads: int = 1,
                           flow_memory: Optional[int] = None) -> MalliavinSmpBundle:
    """Pi, aleph, gradH, Psi, M and N1..N3 along the reference path, and the control bracket

    R^T S M_{s+1} + Gamma^T N1 + G2_u^T N2 + pi Theta_u^T N3 + h_u^T D^B aleph
    + w (L_u - g_u^T ell) at every `stride`-th step s, S = e^{dtA*}.
    """
    require(stride >= 1, f"stride must be at least 1, got {stride}")
    model, path = hat.model, hat.path
    M, n, N, c = path.M, path.n_steps, model.N, model.control_dim
    dt, dec = hat.dt, hat.decay
    eval_steps = list(range(0, n, stride))
    x_side, u_side = plan_slots(hat)
    planned = planned_replays(n, eval_steps, x_side, u_side)
    if planned > budget:
        raise BudgetExceeded(f"Malliavin assembly needs {planned} resimulations, budget is {budget}",
                             requested=planned, budget=budget)
    logger.info("Malliavin assembly: %d evaluation steps, %d planned resimulations", len(eval_steps), planned)

    replayer = HatReplayer(hat, bump_scale, budget)
    base = replayer.base
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        grad_H = np.stack(list(pool.map(
            lambda k: hamiltonian_gradient(replayer, base, k, x_side), range(n))), axis=1)

    bundle = MalliavinSmpBundle(Pi=base.Pi, aleph=base.aleph, grad_H=grad_H, eval_steps=eval_steps,
                                weights=_evaluation_weights(eval_steps, n, dt),
                                bracket=np.zeros((M, n, c)))
    flow_kw = {} if flow_memory is None else {"memory_cap": flow_memory}
    h, rates, w = replayer.h, model.jm.rates, model.quad_weights

    def evaluate(s: int):
        a = s + 1
        Psi = np.zeros((M, n, N))
        if a < n:
            flow = simulate_flow(model, path, a, **flow_kw)
            Psi[:, a:] = np.einsum("mkab,mka->mkb", flow.ops[:, a:n], grad_H[:, a:])
        M_a = base.Pi[:, a] + dt * Psi[:, a:].sum(axis=1)
        M_rec = transported_costate(replayer, base, a, x_side, grad_H=grad_H) if a < n else base.Pi[:, a]
        defect = float(np.max(np.abs(M_rec - M_a)))

        def derivative(make):
            sp = replayer.replay(make(+h), s, base)
            sm = replayer.replay(make(-h), s, base)
            Mp = transported_costate(replayer, sp, a, x_side) if a < n else sp.Pi[:, a]
            Mm = transported_costate(replayer, sm, a, x_side) if a < n else sm.Pi[:, a]
            return dec * (Mp - Mm) / (2 * h), (sp.aleph[:, s] - sm.aleph[:, s]) / (2 * h)

        N1 = np.zeros((M, model.n_W, N))
        N2 = np.zeros((M, model.d, N))
        N3 = np.zeros((M, model.K, N))
        Da = np.zeros((M, model.d))
        for i in u_side.w_modes:
            N1[:, i], _ = derivative(lambda e: hat.batch.bump_W(s, i, e))
        for j in u_side.b_comps:
            N2[:, j], Da[:, j] = derivative(lambda e: hat.batch.bump_B(s, j, e))
        for q in u_side.marks:
            sa = replayer.replay(hat.batch.add_jump(s, q), s, base)
            Ma = transported_costate(replayer, sa, a, x_side) if a < n else sa.Pi[:, a]
            N3[:, q] = dec * (Ma - M_rec)

        st = HatLinearization(model, path).at(s)
        g, L = BackwardJets(model, path, hat.bsde).at(s)
        br = np.einsum("...nc,...n->...c", st.R_hat, dec * M_a)
        br = br + np.einsum("...inc,...in->...c", st.noise_w.d_u, N1)
        br = br + np.einsum("...jnc,...jn->...c", st.noise_b.d_u, N2)
        if model.K:
            br = br + np.einsum("q,...qnc,...qn->...c", rates, st.jump.d_u, N3)
        br = br + np.einsum("...jc,...j->...c", st.observation.d_u, Da)
        gl = np.einsum("...qac,...a->...qc", g.d_u, hat.ell[:, s])
        br = br + np.einsum("q,...qc->...c", w, L.d_u - gl)
        return s, Psi, M_a, N1, N2, N3, Da, np.broadcast_to(br, (M, c)), defect

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(evaluate, eval_steps))
    for s, Psi, M_a, N1, N2, N3, Da, br, defect in results:
        bundle.Psi[s], bundle.M[s] = Psi, M_a
        bundle.N1[s], bundle.N2[s], bundle.N3[s], bundle.D_aleph_B[s] = N1, N2, N3, Da
        bundle.bracket[:, s] = br
        bundle.identity_defect = max(bundle.identity_defect, defect)
    bundle.replays = replayer.replays
    logger.info("Malliavin assembly done: %d resimulations, recursion/flow gap %.2e",
                replayer.replays, bundle.identity_defect)
    return bundle


def malliavin_stationarity(bundle: MalliavinSmpBundle, hat: HatEnsemble) -> SmpGradient:
    """Per-knot policy-feature projection of the Malliavin bracket, integrated over each knot."""
    return gradient_from_bracket(hat.policy, hat.path, bundle.bracket, weights=bundle.weights,
                                 route="malliavin")
