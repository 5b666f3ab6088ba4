"""
tools/config.py
Run configuration: strict pydantic schema, JSON loading and the builders
that turn a validated config into spaces, grids, models and policies.
"""

import hashlib
import json
import logging
from dataclasses import fields
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from tools.errors import ConfigError
from tools.forward import DEFAULT_FLOW_MEMORY
from tools.models import (HarvestingParams, LqParams, ModelSpec, make_harvesting_model,
                          make_lq_model, make_random_bounded_model)
from tools.noise import JumpMeasureSpec, TimeGrid
from tools.policy import PolicyFeatures, PolicyParams
from tools.regression import RegressionBasis, RegressionKind
from tools.smp import OptimizerOptions
from tools.spectral import BasisKind, SpectralSpace, build_spectral_space

logger = logging.getLogger(__name__)


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_param_names(params: dict, cls) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(params) - known)
    if unknown:
        raise ValueError(f"unknown parameter(s) {unknown}; known: {sorted(known)}")
    return params


# ==== Model section (tagged by kind) ==== #

class HarvestingConfig(Strict):
    kind: Literal["harvesting"] = "harvesting"
    params: dict[str, Union[float, list[float]]] = Field(default_factory=dict)

    @field_validator("params")
    @classmethod
    def _known(cls, v):
        return _check_param_names(v, HarvestingParams)


class LqConfig(Strict):
    kind: Literal["lq"] = "lq"
    params: dict[str, float] = Field(default_factory=dict)

    @field_validator("params")
    @classmethod
    def _known(cls, v):
        return _check_param_names(v, LqParams)


class RandomBoundedConfig(Strict):
    kind: Literal["random_bounded"] = "random_bounded"
    seed: int = 7
    control_dim: int = Field(1, ge=1)


ModelConfig = Annotated[Union[HarvestingConfig, LqConfig, RandomBoundedConfig],
                        Field(discriminator="kind")]


# ==== Numerical sections ==== #

class DiscretizationConfig(Strict):
    dim_h: int = Field(16, ge=1)
    n_W: int = Field(16, ge=1)
    d: int = Field(1, ge=1)
    n_steps: int = Field(64, ge=1)
    T: float = Field(1.0, gt=0)
    basis_kind: BasisKind = BasisKind.NEUMANN_COSINE
    domain_length: float = Field(1.0, gt=0)
    diffusivity: Optional[float] = Field(None, gt=0)
    eigenvalues: Optional[list[float]] = None


class JumpsConfig(Strict):
    marks: list[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3])
    weights: list[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25])

    @model_validator(mode="after")
    def _paired(self):
        if len(self.marks) != len(self.weights):
            raise ValueError(f"jumps.marks has {len(self.marks)} entries but jumps.weights has {len(self.weights)}")
        if any(w <= 0 for w in self.weights):
            raise ValueError("jumps.weights must be positive")
        return self


class EnsembleConfig(Strict):
    M: int = Field(4096, ge=2)
    seed: int = Field(0, ge=0)


class PolicyConfig(Strict):
    features: PolicyFeatures = PolicyFeatures.AFFINE_Y
    n_knots: int = Field(4, ge=1)
    init: float = 0.5


class RegressionConfig(Strict):
    kind: RegressionKind = RegressionKind.MODE_QUADRATIC
    degree: int = Field(2, ge=1)
    max_features: int = Field(64, ge=2)
    ridge: float = Field(1e-8, ge=0)


class DualityConfig(Strict):
    ladder: list[int] = Field(default_factory=lambda: [2, 4, 8, 16])
    chi_scale: float = 0.1
    trace_dims: list[int] = Field(default_factory=lambda: [16, 32])
    trace_tolerance: float = Field(0.25, gt=0)


class VariationConfig(Strict):
    eps: list[float] = Field(default_factory=lambda: [0.08, 0.04, 0.02])
    scaling_eps: list[float] = Field(default_factory=lambda: [0.1, 0.05, 0.025])
    scaling_target: float = 2.0
    scaling_tolerance: float = 0.3
    agreement: float = Field(0.05, gt=0)
    directions: int = Field(5, ge=1)

    @field_validator("eps", "scaling_eps")
    @classmethod
    def _positive(cls, v):
        if len(v) < 2 or any(e <= 0 for e in v):
            raise ValueError("need at least two positive step sizes")
        return v


class MalliavinConfig(Strict):
    bump: float = Field(1e-4, gt=0)
    stride: int = Field(8, ge=1)
    budget: int = Field(200_000, ge=1)
    paths: int = Field(512, ge=2)
    adapted_tolerance: float = 1e-9
    negative_control_se: float = 5.0
    perturbation: float = 0.5


class OptimizerConfig(Strict):
    step: float = Field(0.5, gt=0)
    iters: int = Field(30, ge=1)
    tol: float = Field(1e-6, ge=0)
    max_backtracks: int = Field(10, ge=0)
    shrink: float = Field(0.5, gt=0, lt=1)
    grow: float = Field(1.0, ge=1)


class TolerancesConfig(Strict):
    n_se: float = Field(3.0, gt=0)
    flow_composition: float = 1e-9
    flow_replay: float = 1e-10
    smoothing_target: float = 0.25
    smoothing_tolerance: float = 0.05


class RunSection(Strict):
    out_dir: str = "results"
    threads: int = Field(1, ge=1)
    flow_memory_mb: int = Field(DEFAULT_FLOW_MEMORY // 2 ** 20, ge=1)
    csv: bool = True


class RunConfig(Strict):
    """Validated run configuration; every section has defaults."""
    model: ModelConfig = Field(default_factory=LqConfig)
    discretization: DiscretizationConfig = Field(default_factory=DiscretizationConfig)
    jumps: JumpsConfig = Field(default_factory=JumpsConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    regression: RegressionConfig = Field(default_factory=RegressionConfig)
    duality: DualityConfig = Field(default_factory=DualityConfig)
    variation: VariationConfig = Field(default_factory=VariationConfig)
    malliavin: MalliavinConfig = Field(default_factory=MalliavinConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    tolerances: TolerancesConfig = Field(default_factory=TolerancesConfig)
    run: RunSection = Field(default_factory=RunSection)

    @model_validator(mode="after")
    def _consistent(self):
        n_W = self.discretization.n_W
        for n in self.duality.ladder:
            if not 0 <= n <= n_W:
                raise ValueError(f"duality.ladder entry {n} exceeds discretization.n_W={n_W}")
        if self.model.kind == "harvesting":
            if self.discretization.basis_kind == BasisKind.ABSTRACT_DIAGONAL:
                raise ValueError("model.kind=harvesting needs discretization.basis_kind with a spatial basis")
            if any(not 0.0 < a < 1.0 for a in self.jumps.marks):
                raise ValueError("model.kind=harvesting needs jumps.marks inside (0, 1)")
        if self.discretization.basis_kind == BasisKind.ABSTRACT_DIAGONAL:
            ev = self.discretization.eigenvalues
            if ev is None or len(ev) != self.discretization.dim_h:
                raise ValueError("discretization.eigenvalues must list discretization.dim_h values")
        return self

    # ---- builders ---- #

    def build_space(self, dim_h: Optional[int] = None) -> SpectralSpace:
        disc = self.discretization
        diffusivity = disc.diffusivity
        if diffusivity is None:
            diffusivity = (float(self.model.params.get("diffusivity", HarvestingParams.diffusivity))
                           if self.model.kind == "harvesting" else 1.0)
        return build_spectral_space(dim_h or disc.dim_h, disc.domain_length, disc.basis_kind,
                                    eigenvalues=disc.eigenvalues, diffusivity=diffusivity)

    def build_grid(self, n_steps: Optional[int] = None) -> TimeGrid:
        return TimeGrid(T=self.discretization.T, n_steps=n_steps or self.discretization.n_steps)

    def build_jumps(self) -> JumpMeasureSpec:
        return JumpMeasureSpec(marks=tuple(self.jumps.marks), weights=tuple(self.jumps.weights))

    def build_model(self, space: Optional[SpectralSpace] = None) -> ModelSpec:
        space = space or self.build_space()
        disc, jm, m = self.discretization, self.build_jumps(), self.model
        if m.kind == "harvesting":
            params = dict(m.params)
            if "rho_weights" in params:
                params["rho_weights"] = tuple(params["rho_weights"])
            return make_harvesting_model(space, disc.n_W, disc.d, jm, HarvestingParams(**params))
        if m.kind == "lq":
            return make_lq_model(space, disc.n_W, disc.d, jm, LqParams(**m.params))
        return make_random_bounded_model(space, disc.n_W, disc.d, jm, seed=m.seed,
                                         control_dim=m.control_dim)

    def build_policy(self, model: ModelSpec) -> PolicyParams:
        p = self.policy
        return PolicyParams.constant(p.init, p.n_knots, model.control_dim, model.d,
                                     features=p.features, horizon=self.discretization.T)

    def build_basis(self) -> RegressionBasis:
        r = self.regression
        return RegressionBasis(kind=r.kind, degree=r.degree, max_features=r.max_features, ridge=r.ridge)

    def optimizer_options(self) -> OptimizerOptions:
        o = self.optimizer
        return OptimizerOptions(step=o.step, iters=o.iters, tol=o.tol, n_se=self.tolerances.n_se,
                                max_backtracks=o.max_backtracks, shrink=o.shrink, grow=o.grow)

    @property
    def flow_memory(self) -> int:
        return self.run.flow_memory_mb * 2 ** 20


# ==== Loading and hashing ==== #

def _field_path(loc) -> str:
    return ".".join(str(part) for part in loc)


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a JSON run configuration; defaults are filled in."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    return config_from_dict(raw, source=str(path))


def config_from_dict(raw: dict, source: str = "<dict>") -> RunConfig:
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(f"{_field_path(err['loc']) or '<root>'}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{source}: invalid configuration: {problems}") from e
    logger.debug("config %s validated (model=%s)", source, cfg.model.kind)
    return cfg


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
