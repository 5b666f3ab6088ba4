"""
tools/results.py
Results bundle: one self-describing JSON document per command plus CSV
sidecars for tables. Wall-clock timings go to a separate timing file so the
main document is bit-identical across runs of the same configuration.
"""

import csv
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np

from tools.errors import CheckFailed

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RNG_DESCRIPTION = "Philox keyed by SeedSequence([seed, path_index, stream_tag])"


def to_jsonable(obj: Any) -> Any:
    """numpy scalars/arrays, enums and dataclass reports to plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Enum):
        return obj.value
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    gated: bool = True          # counts towards the exit status

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail, "gated": self.gated}


@dataclass
class Table:
    header: list[str]
    rows: list[list] = field(default_factory=list)

    def add(self, *values) -> None:
        self.rows.append([to_jsonable(v) for v in values])


@dataclass
class ResultsBundle:
    command: str
    config: dict
    config_hash: str
    seed: int
    reports: dict = field(default_factory=dict)
    checks: list[CheckResult] = field(default_factory=list)
    tables: dict[str, Table] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    def report(self, name: str, value: Any) -> None:
        self.reports[name] = to_jsonable(value)

    def check(self, name: str, passed: bool, detail: str = "", gated: bool = True) -> CheckResult:
        result = CheckResult(name=name, passed=bool(passed), detail=detail, gated=gated)
        self.checks.append(result)
        logger.info("check %s: %s %s", name, "PASS" if passed else "FAIL", detail)
        return result

    def table(self, name: str, header: list[str]) -> Table:
        self.tables[name] = Table(header=list(header))
        return self.tables[name]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.gated)

    @property
    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if c.gated and not c.passed]

    def raise_on_failure(self) -> None:
        if self.failures:
            names = ", ".join(c.name for c in self.failures)
            raise CheckFailed(f"{len(self.failures)} check(s) failed: {names}")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "provenance": {"seed": self.seed, "rng": RNG_DESCRIPTION,
                           "numpy": np.__version__, "python": platform.python_version()},
            "status": "error" if self.error else ("pass" if self.passed else "fail"),
            "error": self.error,
            "checks": [c.to_dict() for c in self.checks],
            "reports": self.reports,
            "tables": {name: {"header": t.header, "rows": t.rows} for name, t in self.tables.items()},
        }

    def write(self, out_dir: str | Path, csv_sidecars: bool = True) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = self.command.replace("-", "_")
        path = out / f"{stem}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_sidecars:
            for name, t in self.tables.items():
                write_csv(out / f"{stem}_{name}.csv", t)
        (out / f"{stem}_timing.json").write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n")
        logger.info("results written to %s", path)
        return path


def write_csv(path: Path, table: Table) -> Path:
    """Header row then data rows; floats are written with repr (shortest round trip)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(table.header)
        for row in table.rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


class Stopwatch:
    """Context manager recording elapsed wall-clock seconds into bundle.timing."""

    def __init__(self, bundle: ResultsBundle, phase: str):
        self.bundle = bundle
        self.phase = phase

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.bundle.timing[self.phase] = self.bundle.timing.get(self.phase, 0.0) + time.perf_counter() - self._t0
        return False
