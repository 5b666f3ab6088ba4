"""
tools/regression.py
Least-squares conditional expectations on state features.

One ConditionalExpectation is built per time step from the features of that
step and reused for every response regressed there, so all backward
equations solved on an ensemble share the same projector.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from tools.errors import RegressionError, ShapeError, require

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
MIN_PATHS_PER_FEATURE = 10


class RegressionKind(str, Enum):
    POLYNOMIAL = "polynomial"
    MODE_LINEAR = "mode_linear"
    MODE_QUADRATIC = "mode_quadratic"


@dataclass(frozen=True)
class RegressionBasis:
    kind: RegressionKind = RegressionKind.MODE_QUADRATIC
    degree: int = 2
    max_features: int = 64
    ridge: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "kind", RegressionKind(self.kind))
        require(self.degree >= 1, f"polynomial degree must be >= 1, got {self.degree}")
        require(self.max_features >= 2, f"max_features must be >= 2, got {self.max_features}")
        require(self.ridge >= 0, f"ridge must be non-negative, got {self.ridge}")

    def feature_cap(self, n_paths: int) -> int:
        return min(self.max_features, n_paths // MIN_PATHS_PER_FEATURE)

    def monomials(self, n_vars: int, n_paths: int) -> list[tuple[int, ...]]:
        """Index tuples of the monomials used (the empty tuple is the intercept)."""
        cap = self.feature_cap(n_paths)
        if 1 + n_vars > cap:
            raise RegressionError(
                f"{n_paths} paths support {cap} features but the linear basis in "
                f"{n_vars} variables needs {1 + n_vars}", condition_number=float("inf"))

        terms: list[tuple[int, ...]] = [()] + [(i,) for i in range(n_vars)]
        if self.kind == RegressionKind.MODE_LINEAR:
            return terms
        max_degree = 2 if self.kind == RegressionKind.MODE_QUADRATIC else self.degree
        for deg in range(2, max_degree + 1):
            for combo in combinations_with_replacement(range(n_vars), deg):
                if len(terms) >= cap:
                    return terms
                terms.append(combo)
        return terms


def _raw_features(z: np.ndarray, terms: list[tuple[int, ...]]) -> np.ndarray:
    out = np.empty((z.shape[0], len(terms)))
    for c, combo in enumerate(terms):
        if not combo:
            out[:, c] = 1.0
        else:
            col = z[:, combo[0]].copy()
            for i in combo[1:]:
                col *= z[:, i]
            out[:, c] = col
    return out


@dataclass(frozen=True)
class FeatureScaling:
    terms: tuple[tuple[int, ...], ...]
    keep: np.ndarray       # bool mask over non-intercept columns
    mean: np.ndarray
    scale: np.ndarray

    def design(self, z: np.ndarray) -> np.ndarray:
        raw = _raw_features(np.asarray(z, dtype=float), list(self.terms))[:, 1:][:, self.keep]
        return np.hstack([np.ones((raw.shape[0], 1)), (raw - self.mean) / self.scale])


@dataclass(frozen=True)
class FittedProjection:
    """Fitted decision rule: predicts the response from features of the same step."""
    scaling: FeatureScaling
    coef: np.ndarray            # (F, r)
    out_shape: tuple[int, ...]
    values: np.ndarray          # in-sample predictions, shape (M,) + out_shape

    def predict(self, z: np.ndarray) -> np.ndarray:
        phi = self.scaling.design(z)
        return (phi @ self.coef).reshape((phi.shape[0],) + self.out_shape)


class ConditionalExpectation:
    """E[ . | features] on an ensemble, via ridge-stabilized normal equations."""

    def __init__(self, basis: RegressionBasis, z: np.ndarray,
                 weights: Optional[np.ndarray] = None, step: Optional[int] = None):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        self.basis = basis
        self.step = step
        self.M = z.shape[0]
        terms = basis.monomials(z.shape[1], self.M)

        raw = _raw_features(z, terms)[:, 1:]
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        keep = std > 1e-12 * (1.0 + np.abs(mean))
        self.scaling = FeatureScaling(terms=tuple(terms), keep=keep,
                                      mean=mean[keep], scale=std[keep])
        self._phi = np.hstack([np.ones((self.M, 1)), (raw[:, keep] - mean[keep]) / std[keep]])

        if weights is None:
            self._w = None
            gram = self._phi.T @ self._phi / self.M
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (self.M,):
                raise ShapeError(f"weights shape {w.shape} does not match {self.M} paths")
            self._w = w / w.mean()
            gram = (self._phi * self._w[:, None]).T @ self._phi / self.M

        F = gram.shape[0]
        if F > 1 and basis.ridge > 0:
            lam = basis.ridge * np.trace(gram) / F
            gram[1:, 1:] += lam * np.eye(F - 1)
        self.condition_number = float(np.linalg.cond(gram))
        if not np.isfinite(self.condition_number) or self.condition_number > MAX_CONDITION:
            raise RegressionError("regression design is degenerate",
                                  condition_number=self.condition_number, step=step)
        try:
            self._factor = cho_factor(gram)
        except LinAlgError as exc:
            raise RegressionError(f"Cholesky factorization failed: {exc}",
                                  condition_number=self.condition_number, step=step)
        logger.debug("step %s: %d features, cond %.2e", step, F, self.condition_number)

    @property
    def n_features(self) -> int:
        return self._phi.shape[1]

    def fit(self, response: np.ndarray) -> FittedProjection:
        response = np.asarray(response, dtype=float)
        if response.shape[0] != self.M:
            raise ShapeError(f"response has {response.shape[0]} rows, projector has {self.M}")
        out_shape = response.shape[1:]
        R = response.reshape(self.M, -1)
        lhs = self._phi if self._w is None else self._phi * self._w[:, None]
        coef = cho_solve(self._factor, lhs.T @ R / self.M)
        values = (self._phi @ coef).reshape((self.M,) + out_shape)
        return FittedProjection(scaling=self.scaling, coef=coef, out_shape=out_shape, values=values)

    def project(self, response: np.ndarray) -> np.ndarray:
        return self.fit(response).values

    def residual_orthogonality(self, response: np.ndarray) -> float:
        """Largest |mean(residual * feature)|, zero up to rounding without ridge."""
        R = np.asarray(response, dtype=float).reshape(self.M, -1)
        resid = R - self.project(R)
        lhs = self._phi if self._w is None else self._phi * self._w[:, None]
        return float(np.max(np.abs(lhs.T @ resid / self.M)))
