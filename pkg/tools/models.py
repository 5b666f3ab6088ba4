"""
tools/models.py
Coefficient models of the controlled system and their derivative jets.

A model evaluates every coefficient on a batch of states at once. Jets hold
the value and the Gateaux derivatives; a derivative that does not depend on
the state is returned with a leading axis of length 1 and broadcasts.

Layouts (M paths, N modes, c controls, n_W noise modes, d channels,
K marks, Kq quadrature marks = max(K, 1), D backward dimension):

  drift        value (M,N)        d_x (.,N,N)          d_u (.,N,c)
  noise_w      value (M,N,n_W)    d_x (.,n_W,N,N)      d_u (.,n_W,N,c)
  noise_b      value (M,d,N)      d_x (.,d,N,N)        d_u (.,d,N,c)
  jump         value (M,K,N)      d_x (.,K,N,N)        d_u (.,K,N,c)
  observation  value (M,d)        d_x (.,d,N)          d_u (.,d,c)
  driver       value (M,Kq,D)     d_x (.,Kq,D,N) ... d_z (.,Kq,D,D,n_W)
  running_cost value (M,Kq)       d_x (.,Kq,N)   ... d_z (.,Kq,D,n_W)

noise_w.d_x[:, i] is the operator x -> d/dx [G1(x,u) e_i] applied to x.
"""

import itertools
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tools.errors import InvalidArgument, require
from tools.noise import JumpMeasureSpec
from tools.spectral import (SpectralSpace, build_quadrature, constant_mode,
                            schatten_norm)


@dataclass
class CoefficientJet:
    value: np.ndarray
    d_x: Optional[np.ndarray] = None
    d_u: Optional[np.ndarray] = None


@dataclass
class DriverJet:
    value: np.ndarray
    d_x: Optional[np.ndarray] = None
    d_u: Optional[np.ndarray] = None
    d_y: Optional[np.ndarray] = None
    d_z: Optional[np.ndarray] = None
    d_r: Optional[np.ndarray] = None
    d_gamma: Optional[np.ndarray] = None


@dataclass
class TerminalJet:
    value: np.ndarray
    d_x: Optional[np.ndarray] = None


@dataclass
class BackwardState:
    """(y, z, r, gamma) at one step: (M,D), (M,D,n_W), (M,D,d), (M,Kq,D)."""
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    gamma: np.ndarray


class ModelSpec(ABC):
    name = "abstract"

    def __init__(self, space: SpectralSpace, n_W: int, d: int, jm: JumpMeasureSpec,
                 control_dim: int, box_lo, box_hi, x0: np.ndarray, D: int = 1,
                 h_bound: float = np.inf):
        require(n_W >= 1 and d >= 1, "n_W and d must be positive")
        self.space = space
        self.N = space.dim_h
        self.n_W = n_W
        self.d = d
        self.jm = jm
        self.K = jm.K
        self.Kq = jm.n_quadrature
        self.D = D
        self.control_dim = control_dim
        self.box_lo = np.broadcast_to(np.asarray(box_lo, dtype=float), (control_dim,)).copy()
        self.box_hi = np.broadcast_to(np.asarray(box_hi, dtype=float), (control_dim,)).copy()
        require(bool(np.all(self.box_lo <= self.box_hi)), "control box needs lo <= hi")
        self.x0 = np.asarray(x0, dtype=float)
        require(self.x0.shape == (self.N,), f"x0 must have {self.N} modes")
        self.h_bound = h_bound
        self.quad_weights = jm.integration_weights
        self.total_weight = float(self.quad_weights.sum())

    def project_control(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.box_lo, self.box_hi)

    # Forward coefficients
    @abstractmethod
    def drift(self, t, x, u, derivatives=True) -> CoefficientJet: ...

    @abstractmethod
    def noise_w(self, t, x, u, derivatives=True) -> CoefficientJet: ...

    @abstractmethod
    def noise_b(self, t, x, u, derivatives=True) -> CoefficientJet: ...

    @abstractmethod
    def jump(self, t, x, u, derivatives=True) -> CoefficientJet: ...

    @abstractmethod
    def observation(self, t, x, u, derivatives=True) -> CoefficientJet: ...

    # Backward data and costs
    @abstractmethod
    def driver(self, t, x, u, s: BackwardState, derivatives=True) -> DriverJet: ...

    @abstractmethod
    def running_cost(self, t, x, u, s: BackwardState, derivatives=True) -> DriverJet: ...

    @abstractmethod
    def terminal(self, x, derivatives=True) -> TerminalJet: ...

    @abstractmethod
    def terminal_cost(self, x, derivatives=True) -> TerminalJet: ...

    @abstractmethod
    def recursive_cost(self, y0: np.ndarray) -> tuple[float, np.ndarray]: ...

    def zero_backward_state(self, M: int) -> BackwardState:
        return BackwardState(y=np.zeros((M, self.D)), z=np.zeros((M, self.D, self.n_W)),
                             r=np.zeros((M, self.D, self.d)), gamma=np.zeros((M, self.Kq, self.D)))

    def describe(self) -> dict:
        return {"name": self.name, "dim_h": self.N, "n_W": self.n_W, "d": self.d, "K": self.K,
                "D": self.D, "control_dim": self.control_dim,
                "box": [self.box_lo.tolist(), self.box_hi.tolist()]}


def _zeros(*shape) -> np.ndarray:
    return np.zeros(shape)


def _mode_diagonal_noise(x: np.ndarray, sigma: float, n_W: int) -> tuple[np.ndarray, np.ndarray]:
    """G1(x) e_i = sigma x_i e_i for the first min(N, n_W) modes."""
    M, N = x.shape
    r = min(N, n_W)
    value = np.zeros((M, N, n_W))
    idx = np.arange(r)
    value[:, idx, idx] = sigma * x[:, :r]
    d_x = np.zeros((1, n_W, N, N))
    d_x[0, idx, idx, idx] = sigma
    return value, d_x


def huber(s: np.ndarray, delta: float) -> np.ndarray:
    """delta^2 (sqrt(1 + (s/delta)^2) - 1): quadratic near 0, linear growth."""
    return delta ** 2 * (np.sqrt(1.0 + (s / delta) ** 2) - 1.0)


def huber_grad(v: np.ndarray, delta: float, axis=None) -> np.ndarray:
    """Gradient of huber(|v|) with respect to the vector v."""
    sq = np.sum(v ** 2, axis=axis, keepdims=True) if axis is not None else v ** 2
    return v / np.sqrt(1.0 + sq / delta ** 2)


# ================================================================== #
#  Harvesting                                                        #
# ================================================================== #

@dataclass
class HarvestingParams:
    r_a: float = 1.0            # logistic growth rate
    c_a: float = 1.0            # carrying capacity
    sigma: float = 0.2          # multiplicative noise level
    diffusivity: float = 0.5
    p_L: float = 1.0            # price per unit effort
    c_L: float = 1.0            # effort cost
    lambda_L: float = 0.5       # deviation penalty
    x_star: float = 0.8
    beta: float = 1.0
    x_T_star: float = 0.8         # target total stock at T
    eta: float = 0.1
    theta_bar: float = 0.5
    delta_r: float = 1.0
    delta_gamma: float = 1.0
    rho_weights: Optional[tuple[float, ...]] = None
    sensor_width: float = 0.15
    sensor_gain: float = 1.0
    h_saturation: float = 50.0
    u_max: float = 2.0
    x0_level: float = 0.6


class HarvestingModel(ModelSpec):
    name = "harvesting"

    def __init__(self, space: SpectralSpace, n_W: int, d: int, jm: JumpMeasureSpec,
                 params: HarvestingParams):
        require(space.has_spatial_basis, "the harvesting model needs a spatial basis")
        self.p = params
        self.c1 = constant_mode(space)
        super().__init__(space, n_W, d, jm, control_dim=1, box_lo=0.0, box_hi=params.u_max,
                         x0=params.x0_level * self.c1, D=1, h_bound=params.h_saturation)
        self.quad = build_quadrature(space)
        self.alpha = np.asarray(jm.marks, dtype=float)
        L = space.domain_length
        centres = (np.arange(d) + 0.5) * L / d
        profiles = params.sensor_gain * np.exp(
            -(self.quad.nodes[None, :] - centres[:, None]) ** 2 / (2.0 * params.sensor_width ** 2))
        self.sensor = self.quad.project(profiles)          # (d, N)
        rho = params.rho_weights if params.rho_weights is not None else (1.0,) * self.K
        require(len(rho) == self.K, f"rho_weights needs {self.K} entries, got {len(rho)}")
        self.rho = np.asarray(rho, dtype=float) if self.K else np.zeros(1)

    def drift(self, t, x, u, derivatives=True):
        p = self.p
        xf = self.quad.synthesize(x)
        a = p.r_a * xf * (1.0 - xf / p.c_a)
        value = self.quad.project(a) - u[:, :1] * self.c1
        if not derivatives:
            return CoefficientJet(value)
        da = p.r_a * (1.0 - 2.0 * xf / p.c_a) * self.quad.weights
        E = self.quad.basis
        d_x = np.einsum("qa,mq,qb->mab", E, da, E)
        d_u = -self.c1.reshape(1, self.N, 1)
        return CoefficientJet(value, d_x, d_u)

    def noise_w(self, t, x, u, derivatives=True):
        value, d_x = _mode_diagonal_noise(x, self.p.sigma, self.n_W)
        if not derivatives:
            return CoefficientJet(value)
        return CoefficientJet(value, d_x, _zeros(1, self.n_W, self.N, 1))

    def noise_b(self, t, x, u, derivatives=True):
        value = np.zeros((x.shape[0], self.d, self.N))
        if not derivatives:
            return CoefficientJet(value)
        return CoefficientJet(value, _zeros(1, self.d, self.N, self.N), _zeros(1, self.d, self.N, 1))

    def jump(self, t, x, u, derivatives=True):
        value = -self.alpha[None, :, None] * x[:, None, :]
        if not derivatives:
            return CoefficientJet(value)
        d_x = -self.alpha[None, :, None, None] * np.eye(self.N)[None, None]
        return CoefficientJet(value, d_x, _zeros(1, self.K, self.N, 1))

    def observation(self, t, x, u, derivatives=True):
        s = self.p.h_saturation
        arg = x @ self.sensor.T
        value = s * np.tanh(arg / s)
        if not derivatives:
            return CoefficientJet(value)
        sech2 = 1.0 - np.tanh(arg / s) ** 2
        return CoefficientJet(value, sech2[:, :, None] * self.sensor[None], _zeros(1, self.d, 1))

    def driver(self, t, x, u, s, derivatives=True):
        p, lam, M = self.p, self.total_weight, x.shape[0]
        h = self.observation(t, x, u, derivatives=derivatives)
        r = s.r[:, 0, :]                                           # (M,d)
        r_norm = np.sqrt(np.sum(r ** 2, axis=1))
        g_gam = s.gamma[:, :, 0]                                   # (M,Kq)
        common = (p.eta * s.y[:, 0] - p.theta_bar * huber(r_norm, p.delta_r)
                  + np.sum(r * h.value, axis=1)) / lam
        value = (common[:, None] - self.rho[None, :] * huber(np.abs(g_gam), p.delta_gamma))[:, :, None]
        if not derivatives:
            return DriverJet(value)
        Kq = self.Kq
        d_x = np.broadcast_to((np.einsum("mj,mjn->mn", r, h.d_x) / lam)[:, None, None, :],
                              (M, Kq, 1, self.N))
        d_r = (-p.theta_bar * huber_grad(r, p.delta_r, axis=1) + h.value) / lam
        return DriverJet(
            value=value,
            d_x=d_x,
            d_u=_zeros(1, Kq, 1, 1),
            d_y=np.full((1, Kq, 1, 1), p.eta / lam),
            d_z=_zeros(1, Kq, 1, 1, self.n_W),
            d_r=np.broadcast_to(d_r[:, None, None, None, :], (M, Kq, 1, 1, self.d)),
            d_gamma=(-self.rho[None, :] * huber_grad(g_gam, p.delta_gamma))[:, :, None, None],
        )

    def running_cost(self, t, x, u, s, derivatives=True):
        p, lam, L = self.p, self.total_weight, self.space.domain_length
        dev = x - p.x_star * self.c1
        per = (L * (-p.p_L * u[:, 0] + 0.5 * p.c_L * u[:, 0] ** 2)
               + 0.5 * p.lambda_L * np.sum(dev ** 2, axis=1)) / lam
        value = np.repeat(per[:, None], self.Kq, axis=1)
        if not derivatives:
            return DriverJet(value)
        Kq, M = self.Kq, x.shape[0]
        return DriverJet(
            value=value,
            d_x=np.broadcast_to((p.lambda_L * dev / lam)[:, None, :], (M, Kq, self.N)),
            d_u=np.broadcast_to((L * (-p.p_L + p.c_L * u[:, :1]) / lam)[:, None, :], (M, Kq, 1)),
            d_y=_zeros(1, Kq, 1), d_z=_zeros(1, Kq, 1, self.n_W),
            d_r=_zeros(1, Kq, 1, self.d), d_gamma=_zeros(1, Kq, 1),
        )

    def terminal(self, x, derivatives=True):
        value = np.zeros((x.shape[0], 1))
        return TerminalJet(value, _zeros(1, 1, self.N) if derivatives else None)

    def terminal_cost(self, x, derivatives=True):
        p = self.p
        gap = x @ self.c1 - p.x_T_star
        value = 0.5 * p.beta * gap ** 2
        return TerminalJet(value, p.beta * gap[:, None] * self.c1[None] if derivatives else None)

    def recursive_cost(self, y0):
        y0 = np.atleast_1d(np.asarray(y0, dtype=float))
        return float(y0[0]), np.ones(1)


def make_harvesting_model(space: SpectralSpace, n_W: int, d: int, jm: JumpMeasureSpec,
                          params: Optional[HarvestingParams] = None) -> HarvestingModel:
    params = params or HarvestingParams()
    for name in ("r_a", "c_a", "sigma", "p_L", "c_L", "lambda_L", "beta", "eta",
                 "delta_r", "delta_gamma", "sensor_width", "h_saturation", "u_max"):
        if getattr(params, name) <= 0:
            raise InvalidArgument(f"harvesting parameter {name} must be positive")
    for a in jm.marks:
        if not 0.0 < a < 1.0:
            raise InvalidArgument(f"harvesting jump marks must lie in (0, 1), got {a}")
    return HarvestingModel(space, n_W, d, jm, params)


# ================================================================== #
#  Linear-quadratic verification instance                            #
# ================================================================== #

@dataclass
class LqParams:
    a: float = 1.0              # F = -a x + b u e_1
    b: float = 1.0
    sigma: float = 0.1
    sigma_u: float = 0.1
    g2: float = 0.1
    theta_x: float = 0.5
    theta_u: float = 0.1
    h_gain: float = 1.0
    h_u: float = 0.0
    h_saturation: float = 50.0
    eta: float = 0.2            # driver -eta y + g_x x_1 + g_u u
    g_x: float = 0.5
    g_u: float = 0.1
    f_gain: float = 1.0
    q: float = 1.0
    x_ref: float = 0.0
    c: float = 1.0
    p: float = 0.5
    beta: float = 1.0
    x_T: float = 0.5
    a_psi: float = 1.0
    b_psi: float = 0.5
    u_lo: float = -5.0
    u_hi: float = 5.0
    x0_level: float = 1.0


class LqModel(ModelSpec):
    name = "lq"

    def __init__(self, space, n_W, d, jm, params: LqParams):
        self.p = params
        e0 = np.zeros(space.dim_h)
        e0[0] = 1.0
        self.e0 = e0
        super().__init__(space, n_W, d, jm, control_dim=1, box_lo=params.u_lo, box_hi=params.u_hi,
                         x0=params.x0_level * e0, D=1, h_bound=params.h_saturation)
        self.alpha = np.asarray(jm.marks, dtype=float)
        self.channel_mode = np.arange(d) % self.N

    def drift(self, t, x, u, derivatives=True):
        p = self.p
        value = -p.a * x + p.b * u[:, :1] * self.e0
        if not derivatives:
            return CoefficientJet(value)
        return CoefficientJet(value, (-p.a * np.eye(self.N))[None], (p.b * self.e0).reshape(1, self.N, 1))

    def noise_w(self, t, x, u, derivatives=True):
        value, d_x = _mode_diagonal_noise(x, self.p.sigma, self.n_W)
        value[:, 0, 0] += self.p.sigma_u * u[:, 0]
        if not derivatives:
            return CoefficientJet(value)
        d_u = np.zeros((1, self.n_W, self.N, 1))
        d_u[0, 0, 0, 0] = self.p.sigma_u
        return CoefficientJet(value, d_x, d_u)

    def noise_b(self, t, x, u, derivatives=True):
        value = np.broadcast_to(self.p.g2 * self.e0, (x.shape[0], self.d, self.N)).copy()
        if not derivatives:
            return CoefficientJet(value)
        return CoefficientJet(value, _zeros(1, self.d, self.N, self.N), _zeros(1, self.d, self.N, 1))

    def jump(self, t, x, u, derivatives=True):
        p = self.p
        value = self.alpha[None, :, None] * (-p.theta_x * x[:, None, :]
                                             + p.theta_u * u[:, None, :1] * self.e0)
        if not derivatives:
            return CoefficientJet(value)
        d_x = -p.theta_x * self.alpha[None, :, None, None] * np.eye(self.N)[None, None]
        d_u = (p.theta_u * self.alpha[:, None] * self.e0[None, :]).reshape(1, self.K, self.N, 1)
        return CoefficientJet(value, d_x, d_u)

    def observation(self, t, x, u, derivatives=True):
        p = self.p
        s = p.h_saturation
        arg = p.h_gain * x[:, self.channel_mode] + p.h_u * u[:, :1]
        th = np.tanh(arg / s)
        value = s * th
        if not derivatives:
            return CoefficientJet(value)
        sech2 = 1.0 - th ** 2
        d_x = np.zeros((x.shape[0], self.d, self.N))
        d_x[:, np.arange(self.d), self.channel_mode] = p.h_gain * sech2
        return CoefficientJet(value, d_x, (p.h_u * sech2)[:, :, None])

    def driver(self, t, x, u, s, derivatives=True):
        p, lam, Kq = self.p, self.total_weight, self.Kq
        per = (-p.eta * s.y[:, 0] + p.g_x * x[:, 0] + p.g_u * u[:, 0]) / lam
        value = np.repeat(per[:, None], Kq, axis=1)[:, :, None]
        if not derivatives:
            return DriverJet(value)
        d_x = np.zeros((1, Kq, 1, self.N))
        d_x[..., 0] = p.g_x / lam
        return DriverJet(
            value=value, d_x=d_x,
            d_u=np.full((1, Kq, 1, 1), p.g_u / lam),
            d_y=np.full((1, Kq, 1, 1), -p.eta / lam),
            d_z=_zeros(1, Kq, 1, 1, self.n_W), d_r=_zeros(1, Kq, 1, 1, self.d),
            d_gamma=_zeros(1, Kq, 1, 1),
        )

    def running_cost(self, t, x, u, s, derivatives=True):
        p, lam, Kq, M = self.p, self.total_weight, self.Kq, x.shape[0]
        dev = x - p.x_ref * self.e0
        per = (0.5 * p.q * np.sum(dev ** 2, axis=1) + 0.5 * p.c * u[:, 0] ** 2 - p.p * u[:, 0]) / lam
        value = np.repeat(per[:, None], Kq, axis=1)
        if not derivatives:
            return DriverJet(value)
        return DriverJet(
            value=value,
            d_x=np.broadcast_to((p.q * dev / lam)[:, None, :], (M, Kq, self.N)),
            d_u=np.broadcast_to(((p.c * u[:, :1] - p.p) / lam)[:, None, :], (M, Kq, 1)),
            d_y=_zeros(1, Kq, 1), d_z=_zeros(1, Kq, 1, self.n_W),
            d_r=_zeros(1, Kq, 1, self.d), d_gamma=_zeros(1, Kq, 1),
        )

    def terminal(self, x, derivatives=True):
        value = self.p.f_gain * x[:, :1]
        if not derivatives:
            return TerminalJet(value)
        d_x = np.zeros((1, 1, self.N))
        d_x[0, 0, 0] = self.p.f_gain
        return TerminalJet(value, d_x)

    def terminal_cost(self, x, derivatives=True):
        dev = x - self.p.x_T * self.e0
        value = 0.5 * self.p.beta * np.sum(dev ** 2, axis=1)
        return TerminalJet(value, self.p.beta * dev if derivatives else None)

    def recursive_cost(self, y0):
        y = float(np.atleast_1d(y0)[0])
        return self.p.a_psi * y + 0.5 * self.p.b_psi * y ** 2, np.array([self.p.a_psi + self.p.b_psi * y])


def make_lq_model(space: SpectralSpace, n_W: int, d: int, jm: JumpMeasureSpec,
                  params: Optional[LqParams] = None) -> LqModel:
    params = params or LqParams()
    if params.h_saturation <= 0:
        raise InvalidArgument("h_saturation must be positive")
    return LqModel(space, n_W, d, jm, params)


# ================================================================== #
#  Random bounded coefficients                                       #
# ================================================================== #

MODE_DECAY = 1.5                # entry damping (1 + mode)^-MODE_DECAY


def _mode_draw(seed: int, tag: int, shape, bound: float, mode_axes=(0,)) -> np.ndarray:
    """Gaussian draw damped by (1 + mode)^-MODE_DECAY along `mode_axes`, rescaled so its
    operator (or Euclidean) norm is at most `bound`.

    Row r comes from its own stream keyed by (seed, tag, r), so a draw at a
    larger dim_h extends the draw at a smaller one.
    """
    a = np.array([np.random.default_rng([seed, tag, r]).standard_normal(shape[1:])
                  for r in range(shape[0])]).reshape(shape)
    for ax in mode_axes:
        damp = (1.0 + np.arange(shape[ax])) ** -MODE_DECAY
        a = a * damp.reshape([-1 if i == ax else 1 for i in range(a.ndim)])
    norm = np.linalg.norm(a, 2) if a.ndim == 2 else np.linalg.norm(a)
    return a * min(1.0, bound / max(norm, 1e-300))


class RandomBoundedModel(ModelSpec):
    """Affine coefficients with seeded random matrices, all norms at most 1."""
    name = "random_bounded"

    def __init__(self, space, n_W, d, jm, seed: int, control_dim: int = 1,
                 h_saturation: float = 5.0, eta: float = 0.3):
        N, c, K = space.dim_h, control_dim, jm.K
        e0 = np.zeros(N)
        e0[0] = 1.0
        super().__init__(space, n_W, d, jm, control_dim=c, box_lo=-1.0, box_hi=1.0,
                         x0=e0, D=1, h_bound=h_saturation)
        self.seed = seed
        tags = itertools.count()

        def draw(shape, bound, mode_axes=(0,)):
            return _mode_draw(seed, next(tags), shape, bound, mode_axes)

        self.A_F = draw((N, N), 1.0, (0, 1))
        self.B_F = draw((N, c), 0.5)
        self.K_ops = np.stack([draw((N, N), 0.5 / np.sqrt(1.0 + i), (0, 1)) for i in range(n_W)])
        self.Gam = np.stack([draw((N, c), 0.3 / np.sqrt(1.0 + i)) for i in range(n_W)])
        self.E_ops = np.stack([draw((N, N), 0.5, (0, 1)) for _ in range(d)])
        self.G2u = np.stack([draw((N, c), 0.3) for _ in range(d)])
        self.T_ops = np.stack([draw((N, N), 0.5, (0, 1)) for _ in range(K)]) if K else np.zeros((0, N, N))
        self.Tu = np.stack([draw((N, c), 0.3) for _ in range(K)]) if K else np.zeros((0, N, c))
        self.hx = np.stack([draw((N,), 1.0) for _ in range(d)])
        self.hu = np.stack([draw((c,), 0.5, ()) for _ in range(d)])
        self.h_sat = h_saturation
        self.eta = eta
        self.gx = draw((N,), 0.5)
        self.gu = draw((c,), 0.3, ())
        self.gz = draw((n_W,), 0.2, ())
        self.gr = draw((d,), 0.2, ())
        self.g_gamma = 0.2
        self.lx = draw((N,), 0.5)
        self.lu = draw((c,), 0.5, ())
        self.ly = 0.2
        self.fx = draw((N,), 1.0)
        self.phx = draw((N,), 1.0)

    def drift(self, t, x, u, derivatives=True):
        value = x @ self.A_F.T + u @ self.B_F.T
        return CoefficientJet(value, self.A_F[None], self.B_F[None]) if derivatives else CoefficientJet(value)

    def noise_w(self, t, x, u, derivatives=True):
        value = np.einsum("iab,mb->mai", self.K_ops, x) + np.einsum("iac,mc->mai", self.Gam, u)
        return CoefficientJet(value, self.K_ops[None], self.Gam[None]) if derivatives else CoefficientJet(value)

    def noise_b(self, t, x, u, derivatives=True):
        value = np.einsum("jab,mb->mja", self.E_ops, x) + np.einsum("jac,mc->mja", self.G2u, u)
        return CoefficientJet(value, self.E_ops[None], self.G2u[None]) if derivatives else CoefficientJet(value)

    def jump(self, t, x, u, derivatives=True):
        value = np.einsum("kab,mb->mka", self.T_ops, x) + np.einsum("kac,mc->mka", self.Tu, u)
        return CoefficientJet(value, self.T_ops[None], self.Tu[None]) if derivatives else CoefficientJet(value)

    def observation(self, t, x, u, derivatives=True):
        s = self.h_sat
        th = np.tanh((x @ self.hx.T + u @ self.hu.T) / s)
        value = s * th
        if not derivatives:
            return CoefficientJet(value)
        sech2 = (1.0 - th ** 2)[:, :, None]
        return CoefficientJet(value, sech2 * self.hx[None], sech2 * self.hu[None])

    def driver(self, t, x, u, s, derivatives=True):
        lam, Kq, M = self.total_weight, self.Kq, x.shape[0]
        per = (-self.eta * s.y[:, 0] + x @ self.gx + u @ self.gu
               + s.z[:, 0, :] @ self.gz + s.r[:, 0, :] @ self.gr) / lam
        value = (per[:, None] + self.g_gamma * s.gamma[:, :, 0])[:, :, None]
        if not derivatives:
            return DriverJet(value)
        return DriverJet(
            value=value,
            d_x=np.broadcast_to(self.gx / lam, (1, Kq, 1, self.N)),
            d_u=np.broadcast_to(self.gu / lam, (1, Kq, 1, self.control_dim)),
            d_y=np.full((1, Kq, 1, 1), -self.eta / lam),
            d_z=np.broadcast_to(self.gz / lam, (1, Kq, 1, 1, self.n_W)),
            d_r=np.broadcast_to(self.gr / lam, (1, Kq, 1, 1, self.d)),
            d_gamma=np.full((1, Kq, 1, 1), self.g_gamma),
        )

    def running_cost(self, t, x, u, s, derivatives=True):
        lam, Kq, M = self.total_weight, self.Kq, x.shape[0]
        per = (0.5 * np.sum(x ** 2, axis=1) + 0.5 * np.sum(u ** 2, axis=1)
               + x @ self.lx + u @ self.lu + self.ly * s.y[:, 0]) / lam
        value = np.repeat(per[:, None], Kq, axis=1)
        if not derivatives:
            return DriverJet(value)
        return DriverJet(
            value=value,
            d_x=np.broadcast_to(((x + self.lx) / lam)[:, None, :], (M, Kq, self.N)),
            d_u=np.broadcast_to(((u + self.lu) / lam)[:, None, :], (M, Kq, self.control_dim)),
            d_y=np.full((1, Kq, 1), self.ly / lam),
            d_z=_zeros(1, Kq, 1, self.n_W), d_r=_zeros(1, Kq, 1, self.d), d_gamma=_zeros(1, Kq, 1),
        )

    def terminal(self, x, derivatives=True):
        value = (x @ self.fx)[:, None]
        return TerminalJet(value, self.fx.reshape(1, 1, self.N) if derivatives else None)

    def terminal_cost(self, x, derivatives=True):
        value = 0.5 * np.sum(x ** 2, axis=1) + x @ self.phx
        return TerminalJet(value, x + self.phx if derivatives else None)

    def recursive_cost(self, y0):
        y0 = np.atleast_1d(np.asarray(y0, dtype=float))
        return float(y0[0]), np.ones(1)

    def operator_norms(self) -> dict[str, float]:
        """Largest operator norm per coefficient family."""
        def top(stack):
            return float(max((schatten_norm(a, np.inf) for a in stack), default=0.0))
        return {"A_F": top([self.A_F]), "K": top(self.K_ops), "E": top(self.E_ops),
                "T": top(self.T_ops), "B_F": top([self.B_F]), "Gamma": top(self.Gam)}


def make_random_bounded_model(space: SpectralSpace, n_W: int, d: int, jm: JumpMeasureSpec,
                              seed: int, control_dim: int = 1) -> RandomBoundedModel:
    require(control_dim >= 1, "control_dim must be positive")
    require(seed >= 0, f"random model seed must be non-negative, got {seed}")
    return RandomBoundedModel(space, n_W, d, jm, seed=seed, control_dim=control_dim)


# ------------------------------------------------------------------ #
#  Derivative checks                                                 #
# ------------------------------------------------------------------ #

# How each jet derivative contracts with a direction, keyed by (function, argument).
_CONTRACTIONS = {
    ("drift", "x"): "...ab,...b->...a", ("drift", "u"): "...ab,...b->...a",
    ("noise_w", "x"): "...iab,...b->...ai", ("noise_w", "u"): "...iab,...b->...ai",
    ("noise_b", "x"): "...jab,...b->...ja", ("noise_b", "u"): "...jab,...b->...ja",
    ("jump", "x"): "...kab,...b->...ka", ("jump", "u"): "...kab,...b->...ka",
    ("observation", "x"): "...jb,...b->...j", ("observation", "u"): "...jb,...b->...j",
    ("driver", "x"): "...qab,...b->...qa", ("driver", "u"): "...qab,...b->...qa",
    ("driver", "y"): "...qab,...b->...qa", ("driver", "z"): "...qabi,...bi->...qa",
    ("driver", "r"): "...qabj,...bj->...qa", ("driver", "gamma"): "...qab,...qb->...qa",
    ("running_cost", "x"): "...qb,...b->...q", ("running_cost", "u"): "...qb,...b->...q",
    ("running_cost", "y"): "...qb,...b->...q", ("running_cost", "z"): "...qbi,...bi->...q",
    ("running_cost", "r"): "...qbj,...bj->...q", ("running_cost", "gamma"): "...qb,...qb->...q",
    ("terminal", "x"): "...ab,...b->...a", ("terminal_cost", "x"): "...b,...b->...",
}


def check_derivatives(model: ModelSpec, n_points: int = 100, seed: int = 0,
                      rel_bump: float = 1e-6) -> dict[str, float]:
    """Central-difference check of every jet derivative at random points.

    Returns the largest error per "function.argument", measured as
    max|fd - analytic| / (1 + max|analytic|).
    """
    rng = np.random.default_rng(seed)
    M, N, c = n_points, model.N, model.control_dim
    x = model.x0[None, :] + 0.5 * rng.standard_normal((M, N))
    lo, hi = model.box_lo, model.box_hi
    u = lo + (hi - lo) * rng.uniform(0.1, 0.9, size=(M, c))
    s = BackwardState(y=rng.standard_normal((M, model.D)),
                      z=rng.standard_normal((M, model.D, model.n_W)),
                      r=rng.standard_normal((M, model.D, model.d)),
                      gamma=rng.standard_normal((M, model.Kq, model.D)))
    args = {"x": x, "u": u, "y": s.y, "z": s.z, "r": s.r, "gamma": s.gamma}

    def evaluate(fname: str, a: dict, derivatives: bool):
        bs = BackwardState(a["y"], a["z"], a["r"], a["gamma"])
        if fname in ("driver", "running_cost"):
            return getattr(model, fname)(0.0, a["x"], a["u"], bs, derivatives)
        if fname in ("terminal", "terminal_cost"):
            return getattr(model, fname)(a["x"], derivatives)
        return getattr(model, fname)(0.0, a["x"], a["u"], derivatives)

    report: dict[str, float] = {}
    for (fname, arg), spec in _CONTRACTIONS.items():
        jet = evaluate(fname, args, True)
        deriv = getattr(jet, f"d_{arg}")
        if deriv is None or jet.value.size == 0:
            continue
        direction = rng.standard_normal(args[arg].shape)
        step = rel_bump * max(1.0, float(np.max(np.abs(args[arg]))))
        plus = dict(args, **{arg: args[arg] + step * direction})
        minus = dict(args, **{arg: args[arg] - step * direction})
        fd = (evaluate(fname, plus, False).value - evaluate(fname, minus, False).value) / (2 * step)
        analytic = np.einsum(spec, deriv, direction)
        report[f"{fname}.{arg}"] = float(np.max(np.abs(fd - analytic)) / (1.0 + np.max(np.abs(analytic))))

    y0 = rng.standard_normal(model.D)
    v = rng.standard_normal(model.D)
    step = rel_bump * max(1.0, float(np.max(np.abs(y0))))
    fd = (model.recursive_cost(y0 + step * v)[0] - model.recursive_cost(y0 - step * v)[0]) / (2 * step)
    analytic = float(model.recursive_cost(y0)[1] @ v)
    report["recursive_cost.y"] = abs(fd - analytic) / (1.0 + abs(analytic))
    return report


def _max_abs(arr) -> float:
    if arr is None:
        return 0.0
    arr = np.asarray(arr)
    return float(np.max(np.abs(arr))) if arr.size else 0.0


def check_bounds(model: ModelSpec, n_points: int = 1000, seed: int = 0) -> dict[str, float]:
    """Sampled sup of |h| against the declared bound, plus sampled sups of the
    derivatives of g, f, L, phi and psi, keyed "name.argument"."""
    rng = np.random.default_rng(seed)
    M = n_points
    x = model.x0[None, :] + 2.0 * rng.standard_normal((M, model.N))
    u = rng.uniform(model.box_lo, model.box_hi, size=(M, model.control_dim))
    s = BackwardState(y=rng.standard_normal((M, model.D)),
                      z=rng.standard_normal((M, model.D, model.n_W)),
                      r=rng.standard_normal((M, model.D, model.d)),
                      gamma=rng.standard_normal((M, model.Kq, model.D)))
    h = model.observation(0.0, x, u, derivatives=True)
    report = {"h_sup": _max_abs(h.value), "h_bound": float(model.h_bound),
              "h.x": _max_abs(h.d_x), "h.u": _max_abs(h.d_u)}
    for name, jet in (("g", model.driver(0.0, x, u, s)), ("L", model.running_cost(0.0, x, u, s))):
        for arg in ("x", "u", "y", "z", "r", "gamma"):
            report[f"{name}.{arg}"] = _max_abs(getattr(jet, f"d_{arg}"))
    report["f.x"] = _max_abs(model.terminal(x).d_x)
    report["phi.x"] = _max_abs(model.terminal_cost(x).d_x)
    report["psi.y"] = max(_max_abs(model.recursive_cost(y0)[1]) for y0 in s.y[:50])
    return report
