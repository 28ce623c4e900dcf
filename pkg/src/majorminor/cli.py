"""Command-line entry points: solve, verify, converge, sigma-sweep, oracle.

Configuration is a JSON document with a strict schema: unknown keys are
rejected (with a suggestion), all violations are reported at once, and every
run writes a manifest echoing the config, the seed, and a checksum of each
emitted file.  Re-running a manifest's config and seed reproduces the CSV
bodies byte for byte: all randomness is derived from the seed, floats are
written with 17 significant digits, and iteration tables carry no wall-clock
columns except the explicitly labelled seconds column of the solve report.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, MajorMinorError
from .extragradient import (
    ExtragradientConfig,
    FbsdeOperator,
    estimate_lipschitz_v,
    run_extragradient,
)
from .grids import build_grid, sample_noise
from .models import (
    LQParams,
    ModelConstants,
    lq_monotonicity_data,
    make_lq_model,
    make_zero_model,
    split_q,
)
from .oracle import eval_oracle_field, oracle_induced_control, picard_solve, riccati_oracle
from .solver import RegressionBasis, sample_initial
from .verification import (
    check_coefficient_monotonicity,
    check_monotonicity_propagation,
    check_pontryagin_residual,
    check_terminal_monotonicity,
    check_v_monotonicity,
    check_z_bound,
    compute_thresholds,
)

__all__ = ["RunConfig", "RunManifest", "parse_config", "run_solve", "run_sigma_sweep", "main"]

_SCHEMA = {
    "model": {"kind": str, "params": dict},
    "constants": {"sigma": float, "sigma0": float, "discount": float, "clamp_m": (float, type(None))},
    "grid": {"horizon": float, "steps": int},
    "ensemble": {"scenarios": int, "particles": int},
    "init": {"x_mean": float, "x_std": float, "q0": float, "q0_std": float},
    "basis": {"quadratic": bool, "ridge": float},
    "extragradient": {
        "gamma": (float, type(None)),
        "n_max": int,
        "tol": float,
        "averaging": bool,
        "a_scale": float,
        "safety": float,
        "probes": int,
        "track_oracle": bool,
    },
    "verification": {"samples": int, "pairs": int, "region_radius": float},
    "sweep": {"sigma0": list, "horizons": list, "workers": int, "picard_sweeps": int},
    "seed": int,
    "output_dir": str,
}

_LQ_KEYS = {"c1", "c2", "c3", "g1", "g2", "b", "r1", "r2", "p1", "p2"}

_DEFAULTS = {
    "model": {"kind": "lq", "params": {}},
    "constants": {"sigma": 0.5, "sigma0": 0.5, "discount": 0.0, "clamp_m": None},
    "grid": {"horizon": 1.0, "steps": 50},
    "ensemble": {"scenarios": 32, "particles": 500},
    "init": {"x_mean": 1.0, "x_std": 0.3, "q0": 1.0, "q0_std": 0.1},
    "basis": {"quadratic": False, "ridge": 1e-8},
    "extragradient": {
        "gamma": None,
        "n_max": 60,
        "tol": 1e-6,
        "averaging": True,
        "a_scale": 1.0,
        "safety": 0.5,
        "probes": 4,
        "track_oracle": True,
    },
    "verification": {"samples": 200, "pairs": 20, "region_radius": 3.0},
    "sweep": {"sigma0": [0.5], "horizons": [1.0], "workers": 1, "picard_sweeps": 25},
    "seed": 1234,
    "output_dir": "out",
}


@dataclass
class RunConfig:
    """Validated run parameters with defaults filled in."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])


def _suggest(key: str, candidates) -> str:
    match = difflib.get_close_matches(key, list(candidates), n=1)
    return f" (did you mean {match[0]!r}?)" if match else ""


def _check_section(name: str, value: dict, schema: dict, violations: list):
    for key, sub in value.items():
        if key not in schema:
            violations.append(f"unknown key {name}.{key}{_suggest(key, schema)}")
            continue
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(sub, dict):
                violations.append(f"{name}.{key} must be an object")
            continue
        types = expected if isinstance(expected, tuple) else (expected,)
        if float in types and isinstance(sub, int) and not isinstance(sub, bool):
            continue
        if not isinstance(sub, types) or (isinstance(sub, bool) and bool not in types):
            violations.append(f"{name}.{key} has wrong type {type(sub).__name__}")


def parse_config(text: str | dict) -> RunConfig:
    """Validate and complete a configuration document.

    Collects every violation before raising; unknown keys are rejected with
    a closest-match suggestion.
    """
    if isinstance(text, str):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError([f"config is not valid JSON: {exc}"]) from None
    else:
        raw = text
    violations: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigurationError(["config must be a JSON object"])
    for key, value in raw.items():
        if key not in _SCHEMA:
            violations.append(f"unknown key {key}{_suggest(key, _SCHEMA)}")
            continue
        expected = _SCHEMA[key]
        if isinstance(expected, dict):
            if isinstance(value, dict):
                _check_section(key, value, expected, violations)
            else:
                violations.append(f"{key} must be an object")
        else:
            types = expected if isinstance(expected, tuple) else (expected,)
            if not isinstance(value, types) or isinstance(value, bool):
                violations.append(f"{key} has wrong type {type(value).__name__}")

    merged = json.loads(json.dumps(_DEFAULTS))
    for key, value in raw.items():
        if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key].update(value)
        elif key in merged:
            merged[key] = value

    model = merged["model"]
    if model["kind"] not in ("lq", "zero"):
        violations.append(f"model.kind must be 'lq' or 'zero', got {model['kind']!r}")
    for key in model.get("params", {}):
        if key not in _LQ_KEYS:
            violations.append(f"unknown key model.params.{key}{_suggest(key, _LQ_KEYS)}")
    if merged["grid"]["steps"] < 1:
        violations.append(f"grid.steps must be >= 1, got {merged['grid']['steps']}")
    if not merged["grid"]["horizon"] > 0:
        violations.append(f"grid.horizon must be positive, got {merged['grid']['horizon']}")
    if merged["ensemble"]["scenarios"] < 1 or merged["ensemble"]["particles"] < 1:
        violations.append("ensemble.scenarios and ensemble.particles must be >= 1")
    for name in ("sigma", "sigma0"):
        if merged["constants"][name] < 0:
            violations.append(f"constants.{name} must be >= 0")
    gamma = merged["extragradient"]["gamma"]
    if gamma is not None and not gamma > 0:
        violations.append(f"extragradient.gamma must be positive, got {gamma}")
    if violations:
        raise ConfigurationError(violations)
    return RunConfig(data=merged)


@dataclass
class RunManifest:
    """Provenance record emitted once per run."""

    config: dict
    version: str
    seed: int
    started_at: str
    finished_at: str = ""
    files: dict = field(default_factory=dict)

    def add_file(self, path: Path):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.files[path.name] = digest

    def write(self, path: Path):
        payload = {
            "config": self.config,
            "version": self.version,
            "seed": self.seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "files": self.files,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def build_problem(config: RunConfig):
    """Instantiate (operator, grid, noise, init, model pieces) from a config."""
    data = config.data
    c = data["constants"]
    clamp = c["clamp_m"] if c["clamp_m"] is not None else math.inf
    constants = ModelConstants(
        sigma=c["sigma"], sigma0=c["sigma0"], discount=c["discount"], clamp_m=clamp
    )
    if data["model"]["kind"] == "zero":
        cs = make_zero_model(constants)
        params = None
    else:
        params = LQParams(**data["model"]["params"])
        cs = make_lq_model(params, constants, region_radius=data["verification"]["region_radius"])
    grid = build_grid(data["grid"]["horizon"], data["grid"]["steps"])
    noise = sample_noise(
        grid, data["ensemble"]["scenarios"], data["ensemble"]["particles"],
        d=constants.d, d0=constants.d0, seed=config.seed,
    )
    init = sample_initial(
        data["ensemble"]["scenarios"], data["ensemble"]["particles"], seed=config.seed,
        x_mean=data["init"]["x_mean"], x_std=data["init"]["x_std"],
        q0=data["init"]["q0"], q0_std=data["init"]["q0_std"],
        d=constants.d, d0=constants.d0,
    )
    basis = RegressionBasis(quadratic=data["basis"]["quadratic"], ridge=data["basis"]["ridge"])
    eg = data["extragradient"]
    A = eg["a_scale"] * np.eye(constants.d0)
    op = FbsdeOperator(split_q(cs), grid, noise, init, basis, A=A)
    return op, grid, noise, init, cs, params, constants


def _extragradient_config(config: RunConfig) -> ExtragradientConfig:
    eg = config.data["extragradient"]
    return ExtragradientConfig(
        gamma=eg["gamma"], n_max=eg["n_max"], tol=eg["tol"], averaging=eg["averaging"],
        A=eg["a_scale"] * np.eye(1), safety=eg["safety"], probes=eg["probes"],
    )


def run_solve(config: RunConfig, out_dir: str | Path | None = None, dump_ensemble: bool = False) -> int:
    """Drive the full pipeline for one instance and write artifacts.

    Exit status: 0 when the final residual is at or below tolerance, 2 on a
    divergence report, 1 is reserved for errors (raised to the caller).
    """
    data = config.data
    out = Path(out_dir if out_dir is not None else data["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config=data, version="0.1.0", seed=config.seed,
        started_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    op, grid, noise, init, cs, params, constants = build_problem(config)
    eg_config = _extragradient_config(config)

    reference_control = None
    if params is not None and data["extragradient"]["track_oracle"] and constants.sigma0 > 0:
        try:
            sol = riccati_oracle(params, constants, grid)
            reference_control, _ = oracle_induced_control(sol, cs, grid, noise, init)
        except MajorMinorError:
            reference_control = None

    if eg_config.gamma is None:
        L_hat = estimate_lipschitz_v(op, eg_config.probes, eg_config.probe_seed)
    else:
        L_hat = None
    report = run_extragradient(
        op.zero(), eg_config, op, reference_control=reference_control, lipschitz_hint=L_hat
    )

    iter_path = out / "iterations.csv"
    write_csv(
        iter_path,
        ["n", "residual", "dist_to_oracle", "gamma", "seconds"],
        report.iteration_rows(),
    )
    report_path = out / "report.json"
    report_path.write_text(report.to_json() + "\n")

    solve = op.last_solve
    snap_rows = []
    st = solve.state
    mean_u0 = st.U[:, :, 0, 0].mean(axis=1)
    mean_x0 = st.X[:, :, 0, 0].mean(axis=1)
    for j in range(st.phi.shape[0]):
        snap_rows.append(
            (j, st.qf[j, 0, 0], mean_x0[j], st.phi[j, 0], st.Zphi[j, 0, 0], st.qb[j, 0, 0], mean_u0[j])
        )
    snap_path = out / "snapshot.csv"
    write_csv(
        snap_path,
        ["scenario", "q0", "mean_x0", "phi0", "zphi0", "qb0", "mean_u0"],
        snap_rows,
    )
    emitted = [iter_path, report_path, snap_path]

    if dump_ensemble:
        rows = []
        m, p, n1, _ = st.X.shape
        for j in range(m):
            for i in range(p):
                for k in range(n1):
                    rows.append((j, i, grid.nodes[k], st.X[j, i, k, 0], st.U[j, i, k, 0]))
        dump_path = out / "ensemble.csv"
        write_csv(dump_path, ["scenario", "particle", "t", "X", "U"], rows)
        emitted.append(dump_path)

    manifest.finished_at = time.strftime("%Y-%m-%dT%H:%M:%S")
    for path in emitted:
        manifest.add_file(path)
    manifest.write(out / "manifest.json")

    if report.diverged:
        return 2
    return 0 if report.residuals and report.residuals[-1] <= eg_config.tol else 2


def _cell_seed(seed: int, i: int, j: int) -> int:
    return (seed * 1000003 + i * 101 + j * 10007) % (2**31 - 1)


def _sweep_cell(args):
    base, sigma0, horizon, i, j = args
    data = json.loads(json.dumps(base))
    data["constants"]["sigma0"] = sigma0
    data["grid"]["horizon"] = horizon
    data["seed"] = _cell_seed(base["seed"], i, j)
    config = RunConfig(data=data)
    row = {
        "sigma0": sigma0, "horizon": horizon, "seed": config.seed,
        "sigma0_T": float("nan"), "sigma0_star": float("nan"),
        "eg_converged": 0, "eg_residual": float("nan"), "lambda_hat": float("nan"),
        "picard_converged": 0, "picard_diverged": 0, "error": "",
    }
    try:
        op, grid, noise, init, cs, params, constants = build_problem(config)
        if params is not None:
            mono = lq_monotonicity_data(
                params, constants, a_scale=data["extragradient"]["a_scale"],
                region_radius=data["verification"]["region_radius"],
            )
            if mono.kappa > 0 and mono.beta0 > 0:
                thresholds = compute_thresholds(mono, constants.discount, grid.horizon)
                row["sigma0_T"] = thresholds.sigma0_T
                if thresholds.sigma0_star is not None:
                    row["sigma0_star"] = thresholds.sigma0_star
        eg_config = _extragradient_config(config)
        report = run_extragradient(op.zero(), eg_config, op)
        row["eg_converged"] = int(
            not report.diverged and report.residuals and report.residuals[-1] <= eg_config.tol
        )
        row["eg_residual"] = report.residuals[-1] if report.residuals else float("nan")
        row["lambda_hat"] = report.lambda_hat if report.lambda_hat is not None else float("nan")
        basis = RegressionBasis(quadratic=data["basis"]["quadratic"], ridge=data["basis"]["ridge"])
        pic = picard_solve(
            split_q(cs), grid, noise, init, basis,
            tol=eg_config.tol, max_iter=data["sweep"]["picard_sweeps"],
        )
        row["picard_converged"] = int(pic.converged)
        row["picard_diverged"] = int(pic.diverged)
    except MajorMinorError as exc:
        row["error"] = str(exc).replace(",", ";")
    return row


def run_sigma_sweep(config: RunConfig, out_dir: str | Path | None = None) -> int:
    """Volatility x horizon sweep; individual cell failures are recorded and
    the sweep continues."""
    data = config.data
    out = Path(out_dir if out_dir is not None else data["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cells = [
        (data, s, t, i, j)
        for i, s in enumerate(data["sweep"]["sigma0"])
        for j, t in enumerate(data["sweep"]["horizons"])
    ]
    workers = int(data["sweep"].get("workers", 1))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(cell) for cell in cells]
    header = [
        "sigma0", "horizon", "seed", "sigma0_T", "sigma0_star", "eg_converged",
        "eg_residual", "lambda_hat", "picard_converged", "picard_diverged", "error",
    ]
    path = out / "sweep.csv"
    write_csv(path, header, [[row[h] for h in header] for row in rows])
    manifest = RunManifest(
        config=data, version="0.1.0", seed=config.seed,
        started_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
        finished_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    manifest.add_file(path)
    manifest.write(out / "manifest.json")
    return 0


def run_verify(config: RunConfig, out_dir: str | Path | None = None) -> int:
    """Full certification battery on the configured instance."""
    data = config.data
    out = Path(out_dir if out_dir is not None else data["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    op, grid, noise, init, cs, params, constants = build_problem(config)
    samples = data["verification"]["samples"]
    pairs = data["verification"]["pairs"]
    seed = config.seed
    reports = []
    if params is not None:
        mono = lq_monotonicity_data(
            params, constants, a_scale=data["extragradient"]["a_scale"],
            region_radius=data["verification"]["region_radius"],
        )
        beta0 = mono.beta0 if mono.beta0 > 0 else 0.05
        reports.append(check_terminal_monotonicity(cs, mono.A, beta0, samples=samples, seed=seed))
        reports.append(check_coefficient_monotonicity(cs, mono.A, samples=samples, seed=seed))
        if mono.kappa > 0:
            reports.append(
                check_coefficient_monotonicity(
                    cs, mono.A, samples=samples, seed=seed, z_pairs=True,
                    kappa=mono.kappa, slack=(mono.C_M, mono.K),
                )
            )
            thresholds = compute_thresholds(mono, constants.discount, grid.horizon)
        else:
            thresholds = None
    else:
        thresholds = None
    reports.append(check_v_monotonicity(op, pairs=pairs, seed=seed))

    eg_config = _extragradient_config(config)
    report = run_extragradient(op.zero(), eg_config, op)
    solve = op.last_solve
    if params is not None and constants.sigma0 > 0:
        sol = riccati_oracle(params, constants, grid)
        st = solve.state
        lip = 0.0
        for k in range(grid.steps):
            _, _, z_ref = eval_oracle_field(
                sol, grid.nodes[k], 0.0, st.qf[:, k, 0], st.X[:, :, k, 0].mean(axis=1)
            )
            lip = max(lip, float(np.max(np.abs(z_ref))))
        reports.append(check_z_bound(solve, lip))
        residual_scale = max(2.0 * report.residuals[-1], 1e-8) if report.residuals else 1e-8
        reports.append(check_pontryagin_residual(solve, cs, grid, tol_disc=max(residual_scale, 0.05)))

    lines = []
    for rep in reports:
        lines.append(f"{'PASS' if rep.passed else 'FAIL'} {rep.name}: margin={rep.margin:.6g} se={rep.se:.6g}")
    payload = {
        "reports": [json.loads(rep.to_json()) for rep in reports],
        "thresholds": None
        if thresholds is None
        else {
            "gamma_star": thresholds.gamma_star,
            "sigma0_T": thresholds.sigma0_T,
            "sigma0_star": thresholds.sigma0_star,
            "branch": thresholds.branch,
        },
    }
    (out / "certification.json").write_text(json.dumps(payload, indent=2) + "\n")
    print("\n".join(lines))
    return 0 if all(rep.passed for rep in reports) else 2


def run_converge(config: RunConfig, out_dir: str | Path | None = None) -> int:
    """Discretization-floor study: the operator residual at the oracle
    control under grid refinement (half dt, double particles)."""
    data = config.data
    if data["model"]["kind"] != "lq":
        raise ConfigurationError(["converge study needs the lq model"])
    out = Path(out_dir if out_dir is not None else data["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for level in range(3):
        scaled = json.loads(json.dumps(data))
        scaled["grid"]["steps"] = data["grid"]["steps"] * 2**level
        scaled["ensemble"]["particles"] = data["ensemble"]["particles"] * 2**level
        config_l = RunConfig(data=scaled)
        op, grid, noise, init, cs, params, constants = build_problem(config_l)
        sol = riccati_oracle(params, constants, grid)
        alpha_star, _ = oracle_induced_control(sol, cs, grid, noise, init)
        v_star = op(alpha_star)
        rows.append((level, grid.steps, scaled["ensemble"]["particles"], op.norm(v_star)))
    path = out / "convergence.csv"
    write_csv(path, ["level", "steps", "particles", "residual_at_oracle"], rows)
    print(f"wrote {path}")
    return 0


def run_oracle(config: RunConfig, out_dir: str | Path | None = None) -> int:
    """Export the baseline field coefficients."""
    data = config.data
    if data["model"]["kind"] != "lq":
        raise ConfigurationError(["oracle export needs the lq model"])
    out = Path(out_dir if out_dir is not None else data["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _, grid, _, _, cs, params, constants = build_problem(config)
    sol = riccati_oracle(params, constants, grid)
    rows = [
        (t, a, b_u, c_u, k2, k12, kc)
        for t, a, b_u, c_u, k2, k12, kc in zip(
            sol.times, sol.a, sol.b_u, sol.c_u, sol.k2, sol.k12, sol.kc
        )
    ]
    path = out / "oracle.csv"
    write_csv(path, ["t", "a", "b_u", "c_u", "k2", "k12", "kc"], rows)
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="majorminor",
        description="Particle solver and certification suite for major-minor mean field systems",
    )
    parser.add_argument("command", choices=["solve", "verify", "converge", "sigma-sweep", "oracle"])
    parser.add_argument("--config", required=True, help="path to the JSON configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--dump-ensemble", action="store_true", help="dump the full ensemble CSV")
    args = parser.parse_args(argv)
    try:
        config = parse_config(Path(args.config).read_text())
        if args.seed is not None:
            config.data["seed"] = int(args.seed)
        if args.command == "solve":
            return run_solve(config, args.out, dump_ensemble=args.dump_ensemble)
        if args.command == "verify":
            return run_verify(config, args.out)
        if args.command == "converge":
            return run_converge(config, args.out)
        if args.command == "sigma-sweep":
            return run_sigma_sweep(config, args.out)
        return run_oracle(config, args.out)
    except MajorMinorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
