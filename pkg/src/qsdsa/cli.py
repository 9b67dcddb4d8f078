"""Command-line entry point: ``qsdsa <command> --config cfg.json [--seed N] [--out DIR]``.

Configs are JSON documents with top-level keys ``command``, ``model``,
``schedule``, ``run``, ``analysis`` and ``output``. Each command validates
against its own schema before anything runs; unknown keys are rejected.

Exit codes: 0 success, 1 internal or numeric failure, 2 config error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from . import analysis as an
from . import output as io
from .driver import FiniteStateModel, RunConfig, run, run_replicas
from .euler import NoiseSpec, benchmark_model, ou_interaction_model
from .measure import DiscreteMeasure, MeasureError, StepSchedule, tv_distance
from .ode import check_time_change_equivalence, integrate_linearized, integrate_qsd_ode
from .oracle import (
    AssumptionViolation,
    MeanFieldFiniteKernel,
    check_h0,
    check_lower_upper,
    check_minorization,
    check_qsd_characterization,
    find_qsds,
    fundamental_kernel,
    measure_grid,
    qsd_fixed_point,
    survival_deviation,
)

__all__ = ["ConfigError", "COMMANDS", "schema_for", "load_config", "main"]

COMMANDS = ("simulate", "oracle", "ode", "check", "fixed-points", "hsweep")
U64_MAX = 2**64 - 1


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": U64_MAX}
_prob_vec = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1}


def _obj(props: dict, required=(), **kw) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False, **kw}


def _benchmark_schema(need_h: bool) -> dict:
    return _obj(
        {"type": {"const": "benchmark"}, "gamma": _pos, "h": _pos, "low": _num, "high": _num},
        ["type", "gamma"] + (["h"] if need_h else []),
    )


_ou_schema = _obj(
    {
        "type": {"const": "ou-interaction"},
        "h": _pos,
        "R": _pos,
        "theta": _num,
        "coupling": _num,
        "noise": _obj({"kind": {"enum": ["gaussian", "stable"]},
                       "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 2}},
                      ["kind"]),
    },
    ["type", "h", "R", "theta", "coupling"],
)

_finite_schema = _obj(
    {
        "type": {"const": "finite-state"},
        "kappa": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "beta": _num,
        "P": {"type": "array", "minItems": 1, "items": _prob_vec},
        "random": _obj({"m": _posint, "seed": _seed, "floor": _pos}, ["m", "seed"]),
    },
    ["type", "kappa", "beta"],
    oneOf=[{"required": ["P"]}, {"required": ["random"]}],
)

_schedule_schema = _obj(
    {"kind": {"enum": ["polynomial", "exponential", "constant-gamma"]}, "alpha": _num},
    ["kind", "alpha"],
)

_grid_schema = _obj({"low": _num, "high": _num, "points": {"type": "integer", "minimum": 3}},
                    ["low", "high", "points"])

_sim_analysis = _obj(
    {
        "hist_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "hist_bins": _posint,
        "kde_grid": _grid_schema,
        "bandwidth": {"anyOf": [{"const": "auto"}, _pos]},
        "late_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    },
    ["hist_range", "hist_bins"],
)

_output_schema = _obj({"dir": {"type": "string"}, "particle_dump": {"type": "boolean"}})

_sim_run_props = {
    "n_steps": _posint,
    "seed": _seed,
    "x0": {"anyOf": [_num, {"type": "array", "items": _num, "minItems": 1}]},
    "snapshot_every": _posint,
    "lyapunov": {"anyOf": [{"type": "number", "minimum": 0}, {"type": "null"}]},
    "replicas": _posint,
}


def schema_for(command: str) -> dict:
    """Full JSON schema of a config for ``command``."""
    top = {"command": {"const": command}, "output": _output_schema}
    if command in ("simulate", "hsweep"):
        need_h = command == "simulate"
        models = [_benchmark_schema(need_h), _finite_schema if need_h else None,
                  _ou_schema if need_h else _obj({**_ou_schema["properties"]},
                                                 ["type", "R", "theta", "coupling"])]
        top["model"] = {"oneOf": [m for m in models if m is not None]}
        top["schedule"] = _schedule_schema
        props = dict(_sim_run_props)
        req = ["n_steps", "seed", "x0", "snapshot_every"]
        extra = {}
        if command == "hsweep":
            # n_steps fixes the step count; time_horizon T runs round(T / h) steps per h
            props.pop("replicas")
            props["h_values"] = {"type": "array", "items": _pos, "minItems": 2}
            props["time_horizon"] = _pos
            req.remove("n_steps")
            req.append("h_values")
            extra = {"oneOf": [{"required": ["n_steps"]}, {"required": ["time_horizon"]}]}
        top["run"] = _obj(props, req, **extra)
        top["analysis"] = _sim_analysis
        required = ["command", "model", "schedule", "run", "analysis"]
    elif command == "oracle":
        top["model"] = _finite_schema
        top["run"] = _obj(
            {
                "starts": {"anyOf": [{"const": "vertices"}, {"type": "array", "items": _prob_vec, "minItems": 1}]},
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "tol": _pos,
                "max_iter": _posint,
                "merge_tol": _pos,
            },
            ["starts", "damping", "tol", "max_iter"],
        )
        required = ["command", "model", "run"]
    elif command == "ode":
        top["model"] = _finite_schema
        top["run"] = _obj(
            {"nu0": _prob_vec, "T": {"type": "number", "minimum": 0}, "dt": _pos,
             "flow": {"enum": ["qsd", "linearized"]}, "equivalence": {"type": "boolean"}},
            ["nu0", "T", "dt"],
        )
        required = ["command", "model", "run"]
    elif command == "check":
        top["model"] = _finite_schema
        top["run"] = _obj(
            {"grid_random": {"type": "integer", "minimum": 0}, "grid_seed": _seed, "L_max": _posint,
             "ell": _posint},
            ["grid_random", "grid_seed", "L_max"],
        )
        required = ["command", "model", "run"]
    elif command == "fixed-points":
        top["model"] = _benchmark_schema(False)
        top["run"] = _obj({"B": _pos, "cells": {"type": "integer", "minimum": 2}})
        required = ["command", "model"]
    else:
        raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    return _obj(top, required)


# ---------------------------------------------------------------------------
# Loading and validation
# ---------------------------------------------------------------------------


def _line_of(text: str, path, extra_key: str | None = None) -> int | None:
    """Best-effort line number of the JSON node at ``path`` (keys only)."""
    pos = 0
    keys = [p for p in path if isinstance(p, str)]
    if extra_key is not None:
        keys.append(extra_key)
    found = None
    for k in keys:
        i = text.find(json.dumps(k), pos)
        if i < 0:
            break
        pos = found = i
    return None if found is None else text.count("\n", 0, found) + 1


def _format_error(err, text: str, source: str) -> str:
    path = list(err.absolute_path)
    extra = None
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        unknown = sorted(set(err.instance) - allowed)
        extra = unknown[0] if unknown else None
    line = _line_of(text, path, extra)
    where = "/" + "/".join(str(p) for p in path)
    loc = f"{source}:{line}" if line else source
    return f"{loc}: at {where}: {err.message}"


def validate_config(cfg, text: str = "", source: str = "<config>") -> None:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{source}: config must be a JSON object")
    command = cfg.get("command")
    if command not in COMMANDS:
        line = _line_of(text, ["command"])
        loc = f"{source}:{line}" if line else source
        raise ConfigError(f"{loc}: at /command: expected one of {', '.join(COMMANDS)}, got {command!r}")
    validator = Draft202012Validator(schema_for(command))
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        raise ConfigError("\n".join(_format_error(e, text, source) for e in errors))


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    validate_config(cfg, text, str(path))
    return cfg


# ---------------------------------------------------------------------------
# Builders (semantic errors are config errors)
# ---------------------------------------------------------------------------


def build_family(spec: dict) -> MeanFieldFiniteKernel:
    try:
        if "P" in spec:
            return MeanFieldFiniteKernel(spec["P"], spec["kappa"], spec["beta"])
        r = spec["random"]
        return MeanFieldFiniteKernel.random(r["m"], spec["kappa"], spec["beta"], r["seed"], r.get("floor", 0.05))
    except MeasureError as exc:
        raise ConfigError(f"model: {exc}") from exc


def build_model(spec: dict, h: float | None = None):
    kind = spec["type"]
    h = spec.get("h") if h is None else h
    try:
        if kind == "benchmark":
            return benchmark_model(spec["gamma"], h, spec.get("low", -1.0), spec.get("high", 1.0))
        if kind == "ou-interaction":
            noise = spec.get("noise", {"kind": "gaussian"})
            return ou_interaction_model(h, spec["R"], spec["theta"], spec["coupling"],
                                        NoiseSpec(noise["kind"], noise.get("alpha")))
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    return FiniteStateModel(build_family(spec))


def _measure(vec, m: int, what: str) -> DiscreteMeasure:
    if len(vec) != m:
        raise ConfigError(f"{what}: expected {m} entries, got {len(vec)}")
    try:
        return DiscreteMeasure.normalized(vec)
    except MeasureError as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def _run_config(cfg: dict, model, n_steps: int | None = None) -> RunConfig:
    r, a, s = cfg["run"], cfg["analysis"], cfg["schedule"]
    x0 = r["x0"]
    if isinstance(model, FiniteStateModel):
        if isinstance(x0, list) or float(x0) != int(x0):
            raise ConfigError("run/x0: finite-state models start from an integer state index")
        x0 = int(x0)
    rc = RunConfig(
        model=model,
        n_steps=r["n_steps"] if n_steps is None else n_steps,
        seed=r["seed"],
        x0=x0,
        schedule=StepSchedule(s["kind"], s["alpha"]),
        snapshot_every=r["snapshot_every"],
        lyapunov=r.get("lyapunov"),
        hist_range=tuple(a["hist_range"]),
        hist_bins=a["hist_bins"],
    )
    try:
        rc.validate()
    except (ValueError, MeasureError) as exc:
        raise ConfigError(f"run: {exc}") from exc
    return rc


def _kde_grid(cfg: dict) -> np.ndarray:
    """``analysis.kde_grid`` if given, else the histogram range with 2001 points."""
    a = cfg["analysis"]
    if "kde_grid" in a:
        g = a["kde_grid"]
        return an.uniform_grid(g["low"], g["high"], g["points"])
    lo, hi = a["hist_range"]
    return an.uniform_grid(lo, hi, 2001)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _oracle_starts(m: int) -> list:
    return [DiscreteMeasure.dirac(m, i) for i in range(m)] + [DiscreteMeasure.uniform(m)]


def _finite_targets(model: FiniteStateModel, vec: np.ndarray) -> dict:
    qsds = find_qsds(model.family, _oracle_starts(model.m) + measure_grid(model.m, 20, 0))
    rows = [{"qsd": q.qsd.weights, "tv": tv_distance(vec, q.qsd),
             "kill_probability": q.kill_probability} for q in qsds]
    best = min(rows, key=lambda r: r["tv"]) if rows else None
    return {
        "oracle_qsds": rows,
        "tv_nearest": None if best is None else best["tv"],
        "oracle_kill_probability_nearest": None if best is None else best["kill_probability"],
    }


def _benchmark_targets(gamma: float, dens: an.DensityOnGrid) -> dict:
    rows = []
    for b in an.benchmark_qsd_exponents(gamma):
        d = an.distances(dens, an.pi_b_density(b, dens.grid))
        rows.append({"b": b, **d})
    pi0 = an.distances(dens, an.pi_b_density(0.0, dens.grid))
    return {
        "qsd_exponents": [r["b"] for r in rows],
        "targets": rows,
        "l1_pi0": pi0["l1"],
        "min_l1": min(r["l1"] for r in rows),
    }


def _simulate_one(cfg: dict, result, out: Path, suffix: str, header: dict) -> dict:
    rc = result.config
    model = rc.model
    io.write_snapshots_csv(out / f"snapshots{suffix}.csv", result.snapshots, header)
    io.write_json(out / f"final_measure{suffix}.json", io.final_measure_payload(result.measure), header)
    if cfg.get("output", {}).get("particle_dump", False):
        io.write_particle_dump(out / f"final_measure{suffix}.bin", result.measure, header)
    late = cfg["analysis"].get("late_fraction", 0.5)
    last = result.snapshots[-1]
    summary = {
        "model": model.name,
        "n_steps": rc.n_steps,
        "seed": rc.seed,
        "kill_count": result.kill_count,
        "kill_rate_late": result.kill_rate(late),
        "mean": last.mean,
        "variance": last.variance,
    }
    if rc.lyapunov is not None:
        vals = np.array([s.lyapunov_value for s in result.snapshots])
        summary["lyapunov_max"] = float(vals.max())
    if isinstance(model, FiniteStateModel):
        vec = result.measure.vector()
        summary["final_measure"] = vec
        summary.update(_finite_targets(model, vec))
    elif model.dim == 1:
        bw = cfg["analysis"].get("bandwidth", "auto")
        dens = an.kde(result.measure, bandwidth=bw, grid=_kde_grid(cfg))
        dens.write_csv(out / f"density{suffix}.csv", header=io.header_line(header))
        summary["kde_bandwidth"] = bw if bw != "auto" else an.silverman_bandwidth(
            result.measure.states, result.measure.weights)
        if model.name == "benchmark":
            summary.update(_benchmark_targets(model.params["gamma"], dens))
    io.write_json(out / f"summary{suffix}.json", summary, header)
    return summary


def cmd_simulate(cfg: dict, out: Path) -> int:
    model = build_model(cfg["model"])
    rc = _run_config(cfg, model)
    replicas = cfg["run"].get("replicas", 1)
    results = [run(rc)] if replicas == 1 else run_replicas(rc, replicas)
    for r, res in enumerate(results):
        suffix = "" if replicas == 1 else f"_r{r}"
        _simulate_one(cfg, res, out, suffix, io.make_header(cfg, res.config.seed))
    return 0


def cmd_hsweep(cfg: dict, out: Path) -> int:
    hs = cfg["run"]["h_values"]
    grid = _kde_grid(cfg)
    bw = cfg["analysis"].get("bandwidth", "auto")
    header = io.make_header(cfg, cfg["run"]["seed"])
    dens = []
    horizon = cfg["run"].get("time_horizon")
    steps = []
    for h in hs:
        n = None if horizon is None else max(1, int(round(horizon / h)))
        rc = _run_config(cfg, build_model(cfg["model"], h=h), n_steps=n)
        steps.append(rc.n_steps)
        res = run(rc)
        d = an.kde(res.measure, bandwidth=bw, grid=grid)
        d.write_csv(out / f"density_h{h!r}.csv", header=io.header_line(dict(header, h=h)))
        dens.append(d)
    pairs = [{"h": hs[k], "h_next": hs[k + 1], "w1": an.distances(dens[k], dens[k + 1])["w1"]}
             for k in range(len(hs) - 1)]
    w = [p["w1"] for p in pairs]
    body = {"h_values": hs, "n_steps": steps, "pairs": pairs,
            "monotone_decreasing": all(w[k + 1] < w[k] for k in range(len(w) - 1))}
    io.write_json(out / "hsweep.json", body, header)
    return 0


def cmd_oracle(cfg: dict, out: Path) -> int:
    K = build_family(cfg["model"])
    r = cfg["run"]
    starts = (_oracle_starts(K.m) if r["starts"] == "vertices"
              else [_measure(s, K.m, f"run/starts/{i}") for i, s in enumerate(r["starts"])])
    runs, distinct = [], []
    merge = r.get("merge_tol", 1e-8)
    for s in starts:
        rep = qsd_fixed_point(K, s, damping=r["damping"], tol=r["tol"], max_iter=r["max_iter"])
        entry = {"start": s.weights, **rep.to_dict()}
        if rep.converged:
            entry["characterization_residual"] = check_qsd_characterization(K, rep.qsd)
            entry["survival_deviation"] = survival_deviation(K, rep.qsd)
            if all(tv_distance(rep.qsd, d["qsd"]) > merge for d in distinct):
                distinct.append(entry)
        runs.append(entry)
    body = {"m": K.m, "runs": runs, "distinct_qsds": [d["qsd"] for d in distinct],
            "n_distinct": len(distinct), "all_converged": all(e["converged"] for e in runs)}
    io.write_json(out / "qsd.json", body, io.make_header(cfg, None))
    return 0


def cmd_ode(cfg: dict, out: Path) -> int:
    K = build_family(cfg["model"])
    r = cfg["run"]
    nu0 = _measure(r["nu0"], K.m, "run/nu0")
    integrate = integrate_linearized if r.get("flow", "qsd") == "linearized" else integrate_qsd_ode
    try:
        path = integrate(K, nu0, r["T"], r["dt"])
    except ValueError as exc:
        raise ConfigError(f"run: {exc}") from exc
    header = io.make_header(cfg, None)
    path.write_csv(out / "path.csv", header=io.header_line(header))
    body = {"flow": r.get("flow", "qsd"), "terminal": path.values[-1],
            "terminal_residual": path.terminal_residual}
    if r.get("equivalence", False):
        body["time_change_deviation"] = check_time_change_equivalence(K, nu0, r["T"], r["dt"])
    io.write_json(out / "ode_summary.json", body, header)
    return 0


def _attempt(fn, *args):
    try:
        return True, fn(*args), None
    except AssumptionViolation as exc:
        return False, None, str(exc)


def cmd_check(cfg: dict, out: Path) -> int:
    K = build_family(cfg["model"])
    r = cfg["run"]
    grid = measure_grid(K.m, r["grid_random"], r["grid_seed"])
    ok0, h0, err0 = _attempt(check_h0, K, grid, r["L_max"])
    report = {"grid_size": len(grid)}
    report["h0"] = {"ok": ok0, "error": err0} if not ok0 else {"ok": True, "ell": h0[0], "rho": h0[1]}
    if ok0:
        lifetimes = max(float(fundamental_kernel(K(mu)).sum(axis=1).max()) for mu in grid)
        report["h0"]["max_expected_lifetime"] = lifetimes
        report["h0"]["lifetime_bound"] = h0[0] / (1.0 - h0[1])
    ell = r.get("ell", 1)
    ok3, mino, err3 = _attempt(check_minorization, K, grid, ell)
    report["minorization"] = ({"ok": True, "ell": ell, "eps": mino[0], "psi": mino[1].weights}
                              if ok3 else {"ok": False, "ell": ell, "error": err3})
    if ok3:
        oklu, lu, errlu = _attempt(check_lower_upper, K, grid, mino[1])
        report["lower_upper"] = {"ok": True, "c1": lu[0], "c2": lu[1]} if oklu else {"ok": False, "error": errlu}
    else:
        report["lower_upper"] = {"ok": False, "error": "skipped: no minorizing measure"}
    report["all_ok"] = all(report[k]["ok"] for k in ("h0", "minorization", "lower_upper"))
    io.write_json(out / "assumptions.json", report, io.make_header(cfg, None))
    return 0


def fixed_points_report(gamma: float, B: float = 50.0, cells: int = 100_000) -> dict:
    roots = an.b_fixed_points(gamma, B=B, cells=cells)
    quoted, local = an.bifurcation_threshold(+1), an.bifurcation_threshold(-1)
    return {
        "gamma": gamma,
        "roots": roots,
        "root_count": len(roots),
        "qsd_exponents": [gamma * m for m in roots],
        "threshold_quoted": quoted,
        "threshold_from_slope": local,
        "above_quoted_threshold": gamma > quoted,
        "above_slope_threshold": gamma > local,
    }


def cmd_fixed_points(cfg: dict, out: Path | None) -> int:
    r = cfg.get("run", {})
    rep = fixed_points_report(cfg["model"]["gamma"], r.get("B", 50.0), r.get("cells", 100_000))
    print(json.dumps(rep, indent=2))
    if out is not None:
        io.write_json(out / "fixed_points.json", rep, io.make_header(cfg, None))
    return 0


_HANDLERS = {
    "simulate": cmd_simulate,
    "hsweep": cmd_hsweep,
    "oracle": cmd_oracle,
    "ode": cmd_ode,
    "check": cmd_check,
    "fixed-points": cmd_fixed_points,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsdsa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=name != "fixed-points", help="JSON config file")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        if name in ("simulate", "hsweep"):
            sp.add_argument("--seed", type=int, help="override run.seed (unsigned 64-bit)")
        if name == "simulate":
            sp.add_argument("--replicas", type=int, help="override run.replicas")
        if name == "fixed-points":
            sp.add_argument("--gamma", type=float, help="interaction strength (instead of --config)")
    return p


def _effective_config(args) -> dict:
    if args.config is None:
        if args.gamma is None:
            raise ConfigError("fixed-points needs --config or --gamma")
        cfg = {"command": "fixed-points", "model": {"type": "benchmark", "gamma": args.gamma}}
        validate_config(cfg)
        return cfg
    cfg = load_config(args.config)
    if cfg["command"] != args.command:
        raise ConfigError(f"{args.config}: config is for {cfg['command']!r}, not {args.command!r}")
    cfg = copy.deepcopy(cfg)
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = args.seed
    if getattr(args, "replicas", None) is not None:
        cfg["run"]["replicas"] = args.replicas
    if getattr(args, "gamma", None) is not None:
        cfg["model"]["gamma"] = args.gamma
    if args.out is not None:
        cfg.setdefault("output", {})["dir"] = args.out
    # overrides are validated like the file itself
    validate_config(cfg, source=str(args.config))
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        out_dir = cfg.get("output", {}).get("dir")
        if out_dir is None and args.command != "fixed-points":
            raise ConfigError("no output directory: set output.dir or pass --out")
        out = None
        if out_dir is not None:
            # the output location is not part of the experiment: keep it out of the hash
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            cfg = copy.deepcopy(cfg)
            cfg["output"].pop("dir")
        return _HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, AssumptionViolation, RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
