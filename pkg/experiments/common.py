"""
experiments/common.py
Run context shared by the lab commands: cached model/policy/ensembles,
noise replay and dumping, and console rendering of checks and tables.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from rich.console import Console
from rich.table import Table as RichTable

from tools.config import RunConfig
from tools.errors import ConfigError
from tools.models import ModelSpec
from tools.noise import NoiseBatch, read_noise_dump, sample_batch, write_noise_dump
from tools.policy import PolicyParams
from tools.results import ResultsBundle, Stopwatch
from tools.smp import HatEnsemble, build_hat_ensemble

console = Console()
logger = logging.getLogger(__name__)

# Stream offsets for ensembles that must be independent of the main one.
P_ENSEMBLE_OFFSET = 1_000_003


@dataclass
class RunContext:
    cfg: RunConfig
    bundle: ResultsBundle
    seed: int
    threads: int = 1
    replay: Optional[Path] = None
    dump_noise: Optional[Path] = None
    options: dict = field(default_factory=dict)
    _model: Optional[ModelSpec] = field(default=None, repr=False)
    _dumped: bool = field(default=False, repr=False)

    @property
    def n_se(self) -> float:
        return self.cfg.tolerances.n_se

    @property
    def model(self) -> ModelSpec:
        if self._model is None:
            self._model = self.cfg.build_model()
        return self._model

    def policy(self, model: Optional[ModelSpec] = None) -> PolicyParams:
        return self.cfg.build_policy(model or self.model)

    def batch(self, M: Optional[int] = None, seed_offset: int = 0,
              model: Optional[ModelSpec] = None) -> NoiseBatch:
        """Main noise ensemble (replayed from file when --replay is set)."""
        model = model or self.model
        M = M or self.cfg.ensemble.M
        if self.replay is not None and seed_offset == 0:
            batch = read_noise_dump(self.replay)
            if (batch.n_W, batch.d, batch.jm.K) != (model.n_W, model.d, model.K):
                raise ConfigError(f"replayed noise {self.replay} has (n_W, d, K) = "
                                  f"({batch.n_W}, {batch.d}, {batch.jm.K}), model needs "
                                  f"({model.n_W}, {model.d}, {model.K})")
            return batch.subset(slice(0, M)) if M < batch.M else batch
        batch = sample_batch(self.cfg.build_grid(), model.n_W, model.d, model.jm,
                             self.seed + seed_offset, M)
        if self.dump_noise is not None and seed_offset == 0 and not self._dumped:
            write_noise_dump(batch, self.dump_noise)
            self._dumped = True
            console.print(f"[dim]noise ensemble written to {self.dump_noise}[/dim]")
        return batch

    def hat(self, policy: Optional[PolicyParams] = None, M: Optional[int] = None,
            model: Optional[ModelSpec] = None, batch: Optional[NoiseBatch] = None) -> HatEnsemble:
        model = model or self.model
        with Stopwatch(self.bundle, "reference_ensemble"):
            return build_hat_ensemble(model, policy or self.policy(model),
                                      batch if batch is not None else self.batch(M, model=model),
                                      self.cfg.build_basis())

    # ---- console helpers ---- #

    def verdict(self, name: str, passed: bool, detail: str = "", gated: bool = True) -> bool:
        self.bundle.check(name, passed, detail, gated)
        mark = "[green]PASS[/green]" if passed else ("[red]FAIL[/red]" if gated else "[yellow]WARN[/yellow]")
        console.print(f"  {mark}  {name}  [dim]{detail}[/dim]")
        return passed

    def show_table(self, name: str, title: str) -> None:
        t = self.bundle.tables[name]
        table = RichTable(title=title, show_lines=False)
        for col in t.header:
            table.add_column(col, justify="right")
        for row in t.rows:
            table.add_row(*[fmt(v) for v in row])
        console.print(table)


def fmt(v) -> str:
    if isinstance(v, bool):
        return "[green]yes[/green]" if v else "[red]no[/red]"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def within(value: float, target: float, tol: float) -> bool:
    return bool(np.isfinite(value) and abs(value - target) <= tol)
