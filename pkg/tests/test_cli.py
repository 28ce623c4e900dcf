import json
from pathlib import Path

import numpy as np
import pytest

from majorminor.cli import (
    RunConfig,
    build_problem,
    main,
    parse_config,
    run_sigma_sweep,
    run_solve,
)
from majorminor.errors import ConfigurationError

FAST_LQ = {
    "model": {"kind": "lq", "params": {"c1": 1.0, "c3": 0.5, "g1": 1.0, "b": 1.0, "p1": 1.0}},
    "constants": {"sigma": 0.5, "sigma0": 0.5},
    "grid": {"horizon": 1.0, "steps": 10},
    "ensemble": {"scenarios": 12, "particles": 64},
    "extragradient": {"n_max": 45, "tol": 5e-3},
    "seed": 7,
}


def test_parse_minimal_config_fills_defaults():
    config = parse_config(json.dumps({"model": {"kind": "lq", "params": {"g1": 1.0}}}))
    assert config["grid"]["steps"] == 50
    assert config["basis"]["ridge"] == 1e-8
    assert config.seed == 1234


def test_parse_rejects_zero_steps_by_name():
    with pytest.raises(ConfigurationError) as err:
        parse_config(json.dumps({"grid": {"horizon": 1.0, "steps": 0}}))
    assert any("grid.steps" in v for v in err.value.violations)


def test_parse_suggests_close_key():
    with pytest.raises(ConfigurationError) as err:
        parse_config(json.dumps({"extragradient": {"gama": 0.5}}))
    joined = " ".join(err.value.violations)
    assert "extragradient.gama" in joined and "gamma" in joined


def test_parse_reports_all_violations_at_once():
    bad = {"grid": {"horizon": -1.0, "steps": 0}, "ensemble": {"scenarios": 0, "particles": 4}}
    with pytest.raises(ConfigurationError) as err:
        parse_config(json.dumps(bad))
    assert len(err.value.violations) >= 3


def test_parse_rejects_unknown_model_param():
    with pytest.raises(ConfigurationError) as err:
        parse_config(json.dumps({"model": {"kind": "lq", "params": {"c9": 1.0}}}))
    assert any("model.params.c9" in v for v in err.value.violations)


def test_zero_model_solve_exits_zero(tmp_path):
    config = parse_config(json.dumps({
        "model": {"kind": "zero", "params": {}},
        "constants": {"sigma": 0.0, "sigma0": 0.0},
        "grid": {"horizon": 1.0, "steps": 5},
        "ensemble": {"scenarios": 4, "particles": 8},
        "init": {"x_mean": 0.0, "x_std": 1.0, "q0": 0.5, "q0_std": 0.0},
        "extragradient": {"n_max": 3, "tol": 1e-6, "gamma": 0.5, "track_oracle": False},
        "seed": 3,
    }))
    code = run_solve(config, tmp_path)
    assert code == 0
    assert (tmp_path / "manifest.json").exists()
    assert (tmp_path / "iterations.csv").exists()


def test_lq_solve_artifacts_and_exit(tmp_path):
    config = parse_config(json.dumps(FAST_LQ))
    code = run_solve(config, tmp_path)
    assert code == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest["files"]) >= {"iterations.csv", "report.json", "snapshot.csv"}
    body = (tmp_path / "iterations.csv").read_text().splitlines()
    assert body[0] == "n,residual,dist_to_oracle,gamma,seconds"
    assert len(body) >= 2


def test_huge_gamma_gives_divergence_exit(tmp_path):
    data = json.loads(json.dumps(FAST_LQ))
    data["extragradient"]["gamma"] = 50.0
    data["extragradient"]["n_max"] = 40
    config = parse_config(json.dumps(data))
    code = run_solve(config, tmp_path)
    assert code == 2


def test_solve_deterministic_csv_bodies(tmp_path):
    config = parse_config(json.dumps(FAST_LQ))
    run_solve(config, tmp_path / "a")
    run_solve(parse_config(json.dumps(FAST_LQ)), tmp_path / "b")
    for name in ("snapshot.csv",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # iteration table identical except the wall-clock column
    rows_a = (tmp_path / "a" / "iterations.csv").read_text().splitlines()
    rows_b = (tmp_path / "b" / "iterations.csv").read_text().splitlines()
    strip = lambda rows: [",".join(r.split(",")[:4]) for r in rows]
    assert strip(rows_a) == strip(rows_b)


def test_dump_ensemble_flag(tmp_path):
    data = json.loads(json.dumps(FAST_LQ))
    data["ensemble"] = {"scenarios": 3, "particles": 5}
    data["grid"]["steps"] = 4
    config = parse_config(json.dumps(data))
    run_solve(config, tmp_path, dump_ensemble=True)
    body = (tmp_path / "ensemble.csv").read_text().splitlines()
    assert body[0] == "scenario,particle,t,X,U"
    assert len(body) == 1 + 3 * 5 * 5


def test_sigma_sweep_table(tmp_path):
    data = json.loads(json.dumps(FAST_LQ))
    data["sweep"] = {"sigma0": [0.3, 0.6], "horizons": [0.5], "workers": 1, "picard_sweeps": 10}
    config = parse_config(json.dumps(data))
    assert run_sigma_sweep(config, tmp_path) == 0
    body = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(body) == 3
    assert body[0].startswith("sigma0,horizon,seed,sigma0_T")


def test_cli_main_solve_and_oracle(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(FAST_LQ))
    code = main(["solve", "--config", str(cfg_path), "--out", str(tmp_path / "run")])
    assert code == 0
    code = main(["oracle", "--config", str(cfg_path), "--out", str(tmp_path / "oracle")])
    assert code == 0
    header = (tmp_path / "oracle" / "oracle.csv").read_text().splitlines()[0]
    assert header == "t,a,b_u,c_u,k2,k12,kc"


def test_cli_main_bad_config_exit_one(tmp_path):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"grid": {"steps": 0}}))
    assert main(["solve", "--config", str(cfg_path)]) == 1


def test_cli_seed_override(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(FAST_LQ))
    main(["solve", "--config", str(cfg_path), "--out", str(tmp_path / "s1"), "--seed", "11"])
    main(["solve", "--config", str(cfg_path), "--out", str(tmp_path / "s2"), "--seed", "12"])
    a = (tmp_path / "s1" / "snapshot.csv").read_text()
    b = (tmp_path / "s2" / "snapshot.csv").read_text()
    assert a != b


def test_build_problem_shapes():
    config = parse_config(json.dumps(FAST_LQ))
    op, grid, noise, init, cs, params, constants = build_problem(config)
    assert noise.dB.shape == (12, 64, 10, 1)
    assert init.X0.shape == (12, 64, 1)
    assert params.c1 == 1.0
