#!/usr/bin/env python3
"""
lab.py: partially observed SPDE control lab
Runs the simulation, verification and optimization experiments on a JSON
run configuration and writes a results bundle per command.

Usage:
  python3 lab.py simulate --config config/harvesting.json --diagnostics
  python3 lab.py verify-duality --config config/random_bounded.json --threads 4
  python3 lab.py gradient-check --config config/lq.json --seed 3 --out results/lq
  python3 lab.py full-harvesting-demo --config config/harvesting.json
"""

import argparse
import logging
import os
import sys
from enum import Enum
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from rich.logging import RichHandler
from rich.panel import Panel
from rich.traceback import install as install_rich_traceback

from experiments import bsde, demo, duality, flow, gradient, malliavin_checks, optimize, simulate
from experiments.common import RunContext, console
from tools.config import RunConfig, config_hash, load_config
from tools.errors import ConfigError, LabError
from tools.results import ResultsBundle, Stopwatch

logger = logging.getLogger("lab")


class Command(str, Enum):
    SIMULATE = "simulate"
    SOLVE_BSDE = "solve-bsde"
    VERIFY_DUALITY = "verify-duality"
    VERIFY_MALLIAVIN = "verify-malliavin"
    VERIFY_FLOW = "verify-flow"
    GRADIENT_CHECK = "gradient-check"
    OPTIMIZE = "optimize"
    FULL_HARVESTING_DEMO = "full-harvesting-demo"


RUNNERS = {
    Command.SIMULATE:             simulate.run,
    Command.SOLVE_BSDE:           bsde.run,
    Command.VERIFY_DUALITY:       duality.run,
    Command.VERIFY_MALLIAVIN:     malliavin_checks.run,
    Command.VERIFY_FLOW:          flow.run,
    Command.GRADIENT_CHECK:       gradient.run,
    Command.OPTIMIZE:             optimize.run,
    Command.FULL_HARVESTING_DEMO: demo.run,
}


def _env_int(name: str) -> Optional[int]:
    raw = os.getenv(name)
    if raw in (None, ""):
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"environment variable {name} must be an integer, got {raw!r}") from e


def setup_logging(verbose: bool) -> None:
    level = "DEBUG" if verbose else os.getenv("SPDE_LAB_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]",
                        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
                        force=True)


def resolve_settings(cfg: RunConfig, seed: Optional[int] = None, threads: Optional[int] = None,
                     out: Optional[str] = None) -> tuple[int, int, Path]:
    """Flags override environment values, which override the config file."""
    env_seed, env_threads = _env_int("SPDE_LAB_SEED"), _env_int("SPDE_LAB_THREADS")
    seed = seed if seed is not None else (env_seed if env_seed is not None else cfg.ensemble.seed)
    threads = threads if threads is not None else (env_threads if env_threads is not None else cfg.run.threads)
    out_dir = Path(out or os.getenv("SPDE_LAB_OUT_DIR") or cfg.run.out_dir)
    if threads < 1:
        raise ConfigError(f"thread count must be at least 1, got {threads}")
    return seed, threads, out_dir


def run_command(cfg: RunConfig, cmd: Command | str, seed: Optional[int] = None,
                threads: Optional[int] = None, out: Optional[str] = None,
                replay: Optional[str] = None, dump_noise: Optional[str] = None,
                options: Optional[dict] = None, write: bool = True) -> ResultsBundle:
    """Run one command and persist its results bundle.

    The bundle is written even when the command raises, with the error recorded.
    """
    cmd = Command(cmd)
    seed, threads, out_dir = resolve_settings(cfg, seed, threads, out)
    cfg = cfg.model_copy(update={"ensemble": cfg.ensemble.model_copy(update={"seed": seed})})
    bundle = ResultsBundle(command=cmd.value, config=cfg.model_dump(mode="json"),
                           config_hash=config_hash(cfg), seed=seed)
    ctx = RunContext(cfg=cfg, bundle=bundle, seed=seed, threads=threads,
                     replay=Path(replay) if replay else None,
                     dump_noise=Path(dump_noise) if dump_noise else None,
                     options=options or {})
    try:
        with Stopwatch(bundle, "total"):
            RUNNERS[cmd](ctx)
    except LabError as e:
        bundle.error = f"{type(e).__name__}: {e.message}"
        raise
    finally:
        if write:
            path = bundle.write(out_dir, csv_sidecars=cfg.run.csv)
            console.print(f"[dim]results: {path}[/dim]")
    return bundle


def summary_panel(bundle: ResultsBundle) -> Panel:
    passed = sum(c.passed for c in bundle.checks if c.gated)
    failed = len(bundle.failures)
    verdict = "[bold green]PASS[/bold green]" if bundle.passed else "[bold red]FAIL[/bold red]"
    return Panel(
        f"Command : {bundle.command}\n"
        f"Checks  : [green]{passed} passed[/green], [red]{failed} failed[/red]\n"
        f"Config  : {bundle.config_hash[:16]}\n"
        f"Verdict : {verdict}",
        title="[bold]Run Complete[/bold]",
        border_style="bold green" if bundle.passed else "bold red",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Partially observed SPDE control lab: simulation, adjoint verification and optimization",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Exit codes:
  0  all enabled checks passed
  1  a PASS-gated check failed
  2  usage, configuration or budget error
  3  numerical abort
""",
    )
    parser.add_argument("command", choices=[c.value for c in Command])
    parser.add_argument("--config", type=str, help="JSON run configuration (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override the ensemble seed")
    parser.add_argument("--threads", type=int, help="worker threads for Malliavin resimulation")
    parser.add_argument("--out", type=str, help="results directory")
    parser.add_argument("--replay", type=str, help="run on a dumped noise ensemble")
    parser.add_argument("--dump-noise", type=str, help="write the main noise ensemble to FILE")
    parser.add_argument("--diagnostics", action="store_true",
                        help="simulate: semigroup fit, derivative check and moment profile")
    parser.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    install_rich_traceback(console=console, show_locals=False)

    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        console.print(Panel(
            f"[bold cyan]SPDE control lab[/bold cyan]  {args.command}\n"
            f"Model   : {cfg.model.kind}\n"
            f"Grid    : dim_h={cfg.discretization.dim_h}, n_W={cfg.discretization.n_W}, "
            f"d={cfg.discretization.d}, K={len(cfg.jumps.marks)}, n_steps={cfg.discretization.n_steps}\n"
            f"Paths   : {cfg.ensemble.M}",
            title="[bold]Configuration[/bold]",
        ))
        bundle = run_command(cfg, args.command, seed=args.seed, threads=args.threads, out=args.out,
                             replay=args.replay, dump_noise=args.dump_noise,
                             options={"diagnostics": args.diagnostics})
        console.print(summary_panel(bundle))
        bundle.raise_on_failure()
    except LabError as e:
        console.print(f"[red]ERROR ({type(e).__name__}): {e.message}[/red]")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
