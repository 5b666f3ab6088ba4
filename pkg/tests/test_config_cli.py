import json
from pathlib import Path

import pytest

from lab import main, resolve_settings, run_command
from tools.config import RunConfig, config_from_dict, config_hash, load_config
from tools.errors import CheckFailed, ConfigError
from tools.models import HarvestingModel, LqModel, RandomBoundedModel
from tools.results import ResultsBundle

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"

TINY = {
    "discretization": {"dim_h": 4, "n_W": 4, "n_steps": 8},
    "ensemble": {"M": 300, "seed": 4},
    "policy": {"n_knots": 2},
    "duality": {"ladder": [2, 4], "trace_dims": [8]},
}


def _write(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(raw if isinstance(raw, str) else json.dumps(raw))
    return path


def test_defaults():
    cfg = RunConfig()
    assert cfg.model.kind == "lq"
    assert cfg.discretization.dim_h == 16 and cfg.discretization.n_steps == 64
    assert cfg.ensemble.M == 4096
    assert cfg.duality.ladder == [2, 4, 8, 16]
    assert cfg.tolerances.n_se == 3.0
    assert cfg.run.out_dir == "results"


def test_ladder_must_fit_the_noise_modes():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"duality": {"ladder": [2, 32]}})
    assert "duality.ladder" in exc.value.message
    assert "discretization.n_W" in exc.value.message


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="ensemble.paths"):
        config_from_dict({"ensemble": {"M": 10, "paths": 3}})
    with pytest.raises(ConfigError, match="unknown parameter"):
        config_from_dict({"model": {"kind": "lq", "params": {"zeta": 1.0}}})


def test_harvesting_needs_marks_inside_the_unit_interval():
    with pytest.raises(ConfigError, match="jumps.marks"):
        config_from_dict({"model": {"kind": "harvesting"}, "jumps": {"marks": [0.5, 1.5], "weights": [1, 1]}})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="config file not found"):
        load_config(tmp_path / "nope.json")
    bad = _write(tmp_path, '{\n  "ensemble": ,\n}')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(bad)


def test_config_hash_is_stable():
    assert config_hash(RunConfig()) == config_hash(config_from_dict({}))
    assert config_hash(RunConfig()) != config_hash(config_from_dict({"ensemble": {"seed": 1}}))


@pytest.mark.parametrize("name, cls", [
    ("lq.json", LqModel),
    ("harvesting.json", HarvestingModel),
    ("random_bounded.json", RandomBoundedModel),
])
def test_sample_configs_build(name, cls):
    cfg = load_config(CONFIG_DIR / name)
    model = cfg.build_model()
    assert isinstance(model, cls)
    assert model.N == cfg.discretization.dim_h
    policy = cfg.build_policy(model)
    assert policy.n_knots == cfg.policy.n_knots


def test_settings_precedence(monkeypatch, tmp_path):
    cfg = config_from_dict(TINY)
    monkeypatch.delenv("SPDE_LAB_SEED", raising=False)
    monkeypatch.delenv("SPDE_LAB_THREADS", raising=False)
    monkeypatch.delenv("SPDE_LAB_OUT_DIR", raising=False)
    assert resolve_settings(cfg) == (4, 1, Path("results"))

    monkeypatch.setenv("SPDE_LAB_SEED", "5")
    monkeypatch.setenv("SPDE_LAB_THREADS", "3")
    monkeypatch.setenv("SPDE_LAB_OUT_DIR", str(tmp_path))
    assert resolve_settings(cfg) == (5, 3, tmp_path)
    assert resolve_settings(cfg, seed=9, threads=2, out="elsewhere") == (9, 2, Path("elsewhere"))

    monkeypatch.setenv("SPDE_LAB_THREADS", "0")
    with pytest.raises(ConfigError):
        resolve_settings(cfg)
    monkeypatch.setenv("SPDE_LAB_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_settings(cfg)


def test_simulate_writes_a_reproducible_bundle(tmp_path, monkeypatch):
    monkeypatch.delenv("SPDE_LAB_SEED", raising=False)
    cfg = config_from_dict(TINY)
    first = run_command(cfg, "simulate", out=str(tmp_path / "a"))
    run_command(cfg, "simulate", out=str(tmp_path / "b"))
    a = json.loads((tmp_path / "a" / "simulate.json").read_text())
    b = json.loads((tmp_path / "b" / "simulate.json").read_text())
    assert a == b
    assert a["schema_version"] == 1
    assert a["command"] == "simulate"
    assert a["provenance"]["seed"] == 4
    assert {c["name"] for c in a["checks"]} >= {"density_martingale", "measure_forms_agree",
                                                 "observation_bounded"}
    assert (tmp_path / "a" / "simulate_trajectory.csv").is_file()
    assert (tmp_path / "a" / "simulate_timing.json").is_file()
    assert first.config_hash == config_hash(cfg)


def test_main_reports_configuration_errors(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    bad = _write(tmp_path, {"ensemble": {"M": 1}})
    assert main(["simulate", "--config", str(bad)]) == 2


def test_results_bundle_gating_and_csv(tmp_path):
    bundle = ResultsBundle(command="verify-flow", config={}, config_hash="0" * 64, seed=0)
    bundle.check("advisory", False, gated=False)
    assert bundle.passed and not bundle.failures
    assert bundle.to_dict()["status"] == "pass"

    t = bundle.table("rows", ["a", "b"])
    t.add(1 / 3, 7)
    bundle.write(tmp_path)
    lines = (tmp_path / "verify_flow_rows.csv").read_text().splitlines()
    assert lines == ["a,b", "0.3333333333333333,7"]
    assert (tmp_path / "verify_flow.json").is_file()

    bundle.check("gated", False, "too far")
    assert bundle.to_dict()["status"] == "fail"
    with pytest.raises(CheckFailed):
        bundle.raise_on_failure()
