"""
tools/policy.py
Observation-feedback policy class: piecewise constant in time over knots,
affine in features of the observed path, projected onto the control box.
"""

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from tools.errors import InvalidArgument, ShapeError, require


class PolicyFeatures(str, Enum):
    CONSTANT = "constant"
    AFFINE_Y = "affine_y"
    AFFINE_Y_QV = "affine_y_qv"     # Y and quadratic-variation excess QV - t per channel

    def count(self, d: int) -> int:
        return {"constant": 1, "affine_y": 1 + d, "affine_y_qv": 1 + 2 * d}[self.value]


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray           # (n_knots, control_dim, n_features)
    features: PolicyFeatures
    horizon: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "features", PolicyFeatures(self.features))
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 3:
            raise ShapeError(f"theta must be (n_knots, control_dim, n_features), got {theta.shape}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def n_knots(self) -> int:
        return self.theta.shape[0]

    @property
    def control_dim(self) -> int:
        return self.theta.shape[1]

    @property
    def n_features(self) -> int:
        return self.theta.shape[2]

    @classmethod
    def constant(cls, value, n_knots: int, control_dim: int, d: int,
                 features: PolicyFeatures | str = PolicyFeatures.AFFINE_Y,
                 horizon: float = 1.0) -> "PolicyParams":
        features = PolicyFeatures(features)
        theta = np.zeros((n_knots, control_dim, features.count(d)))
        theta[:, :, 0] = value
        return cls(theta=theta, features=features, horizon=horizon)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return replace(self, theta=np.asarray(theta, dtype=float).reshape(self.theta.shape))

    def knot_of_step(self, k: int, n_steps: int) -> int:
        return min(self.n_knots - 1, k * self.n_knots // n_steps)

    def knot_of_time(self, t: float) -> int:
        return min(self.n_knots - 1, int(np.floor(t / self.horizon * self.n_knots + 1e-9)))

    def knot_steps(self, knot: int, n_steps: int) -> np.ndarray:
        ks = np.arange(n_steps)
        return ks[np.array([self.knot_of_step(k, n_steps) for k in ks]) == knot]


def policy_features(kind: PolicyFeatures, t: float, Y: np.ndarray, qv: np.ndarray) -> np.ndarray:
    """Feature rows (M, n_features) from the current observation Y and its realized QV."""
    ones = np.ones((Y.shape[0], 1))
    if kind == PolicyFeatures.CONSTANT:
        return ones
    if kind == PolicyFeatures.AFFINE_Y:
        return np.hstack([ones, Y])
    return np.hstack([ones, Y, qv - t])


def evaluate_policy(pp: PolicyParams, t: float, Y_path_prefix: np.ndarray,
                    box_lo, box_hi) -> np.ndarray:
    """Control at time t from the observed prefix Y(t_0..t_k), shape (k+1, d)."""
    if not 0.0 <= t <= pp.horizon + 1e-12:
        raise InvalidArgument(f"time {t} outside [0, {pp.horizon}]")
    Y = np.atleast_2d(np.asarray(Y_path_prefix, dtype=float))
    qv = np.sum(np.diff(Y, axis=0) ** 2, axis=0)
    phi = policy_features(pp.features, t, Y[-1:], qv[None])
    raw = phi @ pp.theta[pp.knot_of_time(t)].T
    return np.clip(raw[0], box_lo, box_hi)


@dataclass
class PolicyStep:
    u: np.ndarray          # (M, c) projected controls
    phi: np.ndarray        # (M, n_features)
    active: np.ndarray     # (M, c) True where the box constraint is not binding


class PolicyEvaluator:
    """Vectorized evaluation on an ensemble at grid step k."""

    def __init__(self, pp: PolicyParams, box_lo, box_hi, n_steps: int, dt: float):
        self.pp = pp
        self.lo = np.asarray(box_lo, dtype=float)
        self.hi = np.asarray(box_hi, dtype=float)
        self.n_steps = n_steps
        self.dt = dt
        require(pp.control_dim == self.lo.shape[0],
                f"policy has {pp.control_dim} controls, box has {self.lo.shape[0]}")

    def step(self, k: int, Y: np.ndarray, qv: np.ndarray) -> PolicyStep:
        phi = policy_features(self.pp.features, k * self.dt, Y, qv)
        if phi.shape[1] != self.pp.n_features:
            raise ShapeError(f"policy expects {self.pp.n_features} features, got {phi.shape[1]}")
        raw = phi @ self.pp.theta[self.pp.knot_of_step(k, self.n_steps)].T
        u = np.clip(raw, self.lo, self.hi)
        return PolicyStep(u=u, phi=phi, active=(raw > self.lo) & (raw < self.hi))


def direction_from_theta(pp: PolicyParams, delta: np.ndarray, phi: np.ndarray,
                         active: np.ndarray) -> np.ndarray:
    """Control direction v_k = d u_k / d theta [delta] on an ensemble.

    phi (M, n_steps, n_features), active (M, n_steps, c) -> v (M, n_steps, c).
    """
    delta = np.asarray(delta, dtype=float).reshape(pp.theta.shape)
    n_steps = phi.shape[1]
    knots = np.array([pp.knot_of_step(k, n_steps) for k in range(n_steps)])
    v = np.einsum("kcf,mkf->mkc", delta[knots], phi)
    return v * active


def project_theta(pp: PolicyParams, theta: np.ndarray, box_lo, box_hi) -> np.ndarray:
    """Clip the intercepts into the box; slopes are left free."""
    theta = np.array(theta, dtype=float).reshape(pp.theta.shape)
    theta[:, :, 0] = np.clip(theta[:, :, 0], box_lo, box_hi)
    return theta
