"""
tools/spectral.py
Galerkin representation of the state space: eigenbasis of the generator,
exact semigroup action and Schatten-class operator norms.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from tools.errors import InvalidArgument, require

# Aliases used in signatures across the package. A mode vector holds the
# coefficients <x, e_i>; a mode operator is a dense matrix in the same basis.
ModeVector = np.ndarray
ModeOperator = np.ndarray

DEFAULT_FIT_WINDOW = (1e-4, 1e-3)
QUADRATURE_OVERSAMPLING = 4


class BasisKind(str, Enum):
    NEUMANN_COSINE = "neumann_cosine"
    DIRICHLET_SINE = "dirichlet_sine"
    ABSTRACT_DIAGONAL = "abstract_diagonal"


@dataclass(frozen=True)
class SpectralSpace:
    dim_h: int
    eigenvalues: np.ndarray = field(repr=False)
    domain_length: float = 1.0
    basis_kind: BasisKind = BasisKind.NEUMANN_COSINE
    diffusivity: float = 1.0

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        require(lam.shape == (self.dim_h,),
                f"eigenvalues must have length dim_h={self.dim_h}, got shape {lam.shape}")
        require(bool(np.all(lam >= 0.0)), "eigenvalues must be non-negative")
        require(bool(np.all(np.diff(lam) >= 0.0)), "eigenvalues must be sorted non-decreasing")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    def decay(self, t: float) -> np.ndarray:
        """Diagonal of e^{tA}: exp(-lambda_i t)."""
        if t < 0:
            raise InvalidArgument(f"semigroup time must be non-negative, got {t}")
        return np.exp(-self.eigenvalues * t)

    @property
    def has_spatial_basis(self) -> bool:
        return self.basis_kind != BasisKind.ABSTRACT_DIAGONAL


def build_spectral_space(
    dim_h: int,
    domain_length: float = 1.0,
    basis_kind: BasisKind | str = BasisKind.NEUMANN_COSINE,
    eigenvalues: Optional[np.ndarray] = None,
    diffusivity: float = 1.0,
) -> SpectralSpace:
    if dim_h < 1:
        raise InvalidArgument(f"dim_h must be at least 1, got {dim_h}")
    if domain_length <= 0:
        raise InvalidArgument(f"domain_length must be positive, got {domain_length}")
    if diffusivity <= 0:
        raise InvalidArgument(f"diffusivity must be positive, got {diffusivity}")
    kind = BasisKind(basis_kind)

    idx = np.arange(dim_h, dtype=float)
    if kind == BasisKind.NEUMANN_COSINE:
        lam = diffusivity * (np.pi * idx / domain_length) ** 2
    elif kind == BasisKind.DIRICHLET_SINE:
        lam = diffusivity * (np.pi * (idx + 1.0) / domain_length) ** 2
    else:
        if eigenvalues is None:
            raise InvalidArgument("abstract_diagonal spaces need explicit eigenvalues")
        lam = np.sort(np.asarray(eigenvalues, dtype=float))

    return SpectralSpace(dim_h=dim_h, eigenvalues=lam, domain_length=float(domain_length),
                         basis_kind=kind, diffusivity=float(diffusivity))


def apply_semigroup(space: SpectralSpace, t: float, x: ModeVector) -> ModeVector:
    """e^{tA}x for a single mode vector or a stack with modes on the last axis."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != space.dim_h:
        raise InvalidArgument(f"mode vector has {x.shape[-1]} coordinates, space has {space.dim_h}")
    return space.decay(t) * x


def schatten_norm(op: ModeOperator, kappa: float) -> float | np.ndarray:
    """(sum sigma_i^kappa)^(1/kappa); kappa=inf gives the operator norm.

    Stacks of operators (leading batch axes) return one norm per operator.
    """
    if not kappa >= 1:
        raise InvalidArgument(f"Schatten index must be >= 1, got {kappa}")
    sv = np.linalg.svd(np.asarray(op, dtype=float), compute_uv=False)
    if np.isinf(kappa):
        out = sv.max(axis=-1)
    elif kappa == 2:
        out = np.sqrt(np.sum(sv ** 2, axis=-1))
    else:
        out = np.sum(sv ** kappa, axis=-1) ** (1.0 / kappa)
    return float(out) if np.ndim(out) == 0 else out


def semigroup_hs_profile(space: SpectralSpace, t_grid) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if np.any(t <= 0):
        raise InvalidArgument("Hilbert-Schmidt profile needs strictly positive times")
    return np.sqrt(np.exp(-2.0 * np.outer(t, space.eigenvalues)).sum(axis=1))


def fit_smoothing_exponent(space: SpectralSpace, t_lo: float = DEFAULT_FIT_WINDOW[0],
                           t_hi: float = DEFAULT_FIT_WINDOW[1],
                           n_points: int = 25) -> tuple[float, float]:
    """Fit |e^{tA}|_2 ~ C t^(-theta) on a log-spaced window; returns (C, theta)."""
    require(0 < t_lo < t_hi, f"fit window must satisfy 0 < t_lo < t_hi, got ({t_lo}, {t_hi})")
    t = np.geomspace(t_lo, t_hi, n_points)
    slope, intercept = np.polyfit(np.log(t), np.log(semigroup_hs_profile(space, t)), 1)
    return float(np.exp(intercept)), float(-slope)


# ================================================================== #
#  Spatial realization (Neumann / Dirichlet bases only)              #
# ================================================================== #

@dataclass(frozen=True)
class Quadrature:
    nodes: np.ndarray       # (n_q,)
    weights: np.ndarray     # (n_q,)
    basis: np.ndarray       # (n_q, dim_h) values e_i(node)

    def synthesize(self, x: np.ndarray) -> np.ndarray:
        """Field values at the nodes from mode coefficients (..., dim_h)."""
        return x @ self.basis.T

    def project(self, values: np.ndarray) -> np.ndarray:
        """Mode coefficients of a field sampled at the nodes (..., n_q)."""
        return (values * self.weights) @ self.basis


def basis_functions(space: SpectralSpace, xi: np.ndarray) -> np.ndarray:
    """Values e_i(xi) as an array of shape (len(xi), dim_h)."""
    if not space.has_spatial_basis:
        raise InvalidArgument("abstract_diagonal spaces have no spatial basis")
    xi = np.asarray(xi, dtype=float)
    L = space.domain_length
    idx = np.arange(space.dim_h, dtype=float)
    if space.basis_kind == BasisKind.NEUMANN_COSINE:
        vals = np.sqrt(2.0 / L) * np.cos(np.pi * np.outer(xi, idx) / L)
        vals[:, 0] = 1.0 / np.sqrt(L)
    else:
        vals = np.sqrt(2.0 / L) * np.sin(np.pi * np.outer(xi, idx + 1.0) / L)
    return vals


def build_quadrature(space: SpectralSpace, n_nodes: Optional[int] = None) -> Quadrature:
    """Midpoint rule; with 4*dim_h nodes products of three retained modes integrate exactly."""
    n_q = n_nodes or QUADRATURE_OVERSAMPLING * space.dim_h
    L = space.domain_length
    nodes = (np.arange(n_q) + 0.5) * L / n_q
    weights = np.full(n_q, L / n_q)
    return Quadrature(nodes=nodes, weights=weights, basis=basis_functions(space, nodes))


def constant_mode(space: SpectralSpace) -> ModeVector:
    """Coefficients of the constant function 1 on the domain."""
    L = space.domain_length
    out = np.zeros(space.dim_h)
    if space.basis_kind == BasisKind.NEUMANN_COSINE:
        out[0] = np.sqrt(L)
    elif space.basis_kind == BasisKind.DIRICHLET_SINE:
        i = np.arange(1, space.dim_h + 1, dtype=float)
        out = np.sqrt(2.0 / L) * L / (np.pi * i) * (1.0 - np.cos(np.pi * i))
    else:
        out[0] = 1.0
    return out
