"""Command line: ``fllab run <config>`` and ``fllab sweep <config> --key K --values ...``.

Configs are TOML files written with dotted keys, e.g.::

    run.mode = "psi_sweep"
    dims.x_dim = 4
    schedule.beta = 1.0

See the README for the full grammar and the frozen output columns.
Exit status: 0 on success, 2 for configuration errors, 3 for numerical
failures.
"""

import argparse
import copy
import json
import logging
import math
import os
import sys
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ._io import atomic_write_text, csv_text
from .derivative import CONSISTENCY_COLUMNS, consistency_report
from .ensemble import MonteCarloPlan
from .interpolator import PSI_TRACE_COLUMNS, ConfigurationSets, EmptyInnerSetError, prepare_tree, psi_estimate, psi_trace_rows
from .perceptron import (
    LOCAL_ENTROPY_COLUMNS,
    BinaryInstance,
    bp_ground_state,
    build_binary_sets,
    build_sphere_samples,
    local_entropy_curve,
    local_entropy_rows,
    restrict_overlap,
    soft_anchor_family,
    zero_temperature_check,
)
from .schedule import LiftingSchedule, ScheduleError, validate_schedule

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

MODES = ("psi_sweep", "derivative_check", "perceptron_census", "local_entropy", "zero_temperature")
CENSUS_COLUMNS = ("n", "m", "alpha", "seed", "count", "ground_state_energy", "ground_state_corner")
ZERO_T_COLUMNS = ("beta", "psi", "psi_stderr", "psi_scaled", "psi_scaled_stderr", "min_max_enum", "gap", "log_l_over_beta", "observed_sign")
SUMMARY_METRIC = {
    "psi_sweep": "psi",
    "derivative_check": "pass_fraction",
    "perceptron_census": "count",
    "local_entropy": "max_sigma",
    "zero_temperature": "gap",
}

log = logging.getLogger("fllab")


class ConfigError(ValueError):
    """Malformed, incomplete or inconsistent experiment configuration."""


class NumericalFailure(RuntimeError):
    """A run produced no usable numbers (empty inner set, non-finite output)."""


# ---------------------------------------------------------------------------
# configuration


DEFAULTS = {
    "dims": {"set_size": 3},
    "sets": {"source": "sphere", "seed": 0, "positive_orthant_y": False, "anchor": "zero", "nu": 0.0, "delta_bar": 0.0},
    "schedule": {"group_exponent": 1.0},
    "mc": {"outer_samples": 100, "seed": 0},
    "run": {"fd_step": 1e-3, "reference_policy": "solutionsOnly", "control_variate": True},
    "output": {"format": "csv"},
}


KNOWN_KEYS = {
    "dims": {"x_dim", "y_dim", "set_size"},
    "sets": {"source", "seed", "positive_orthant_y", "anchor", "nu", "delta_bar", "overlap", "path"},
    "schedule": {"r", "m_schedule", "p_schedule", "q_schedule", "beta", "s", "group_exponent"},
    "mc": {"outer_samples", "per_level_samples", "seed"},
    "run": {"mode", "t_grid", "fd_step", "beta_grid", "d_grid", "reference_policy", "control_variate"},
    "output": {"path", "format", "dir"},
}


def load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return raw


def resolve_config(raw):
    """Merge defaults into ``raw`` and fill every mode-dependent field."""
    cfg = copy.deepcopy(DEFAULTS)
    for block, values in raw.items():
        if block not in KNOWN_KEYS or not isinstance(values, dict):
            raise ConfigError(f"unknown config block {block!r}")
        unknown = sorted(set(values) - KNOWN_KEYS[block])
        if unknown:
            raise ConfigError(f"unknown key {block}.{unknown[0]}")
        cfg.setdefault(block, {}).update(values)
    run = cfg["run"]
    mode = run.get("mode")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    dims = cfg["dims"]
    for key in ("x_dim", "y_dim"):
        if key not in dims:
            raise ConfigError(f"missing dims.{key}")
    cfg["output"].setdefault("path", mode)
    if cfg["output"]["format"] not in ("csv", "json"):
        raise ConfigError("output.format must be csv or json")
    sched = cfg["schedule"]
    if mode in ("psi_sweep", "derivative_check"):
        for key in ("r", "m_schedule", "p_schedule", "q_schedule", "beta", "s"):
            if key not in sched:
                raise ConfigError(f"mode {mode} needs schedule.{key}")
        cfg["mc"].setdefault("per_level_samples", [10] * int(sched["r"]))
        run.setdefault("t_grid", [0.0, 0.25, 0.5, 0.75, 1.0] if mode == "psi_sweep" else [0.25, 0.5, 0.75])
    if mode == "zero_temperature":
        # a single schedule.beta takes precedence over the grid
        if "beta" in sched:
            run["beta_grid"] = [sched["beta"]]
        run.setdefault("beta_grid", [10.0, 20.0, 40.0])
        if "source" not in raw.get("sets", {}):
            cfg["sets"]["source"] = "binary"
    if mode == "local_entropy":
        run.setdefault("d_grid", list(range(int(dims["x_dim"]) + 1)))
    return cfg


def flatten(cfg, prefix=""):
    out = {}
    for key in sorted(cfg):
        value = cfg[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def header_lines(cfg):
    return [f"{key} = {json.dumps(value)}" for key, value in flatten(cfg).items()]


def build_schedule(cfg, beta=None):
    sched = cfg["schedule"]
    try:
        return validate_schedule(
            LiftingSchedule(
                r=int(sched["r"]),
                m_schedule=sched["m_schedule"],
                p_schedule=sched["p_schedule"],
                q_schedule=sched["q_schedule"],
                beta=float(sched["beta"] if beta is None else beta),
                s=float(sched["s"]),
                group_exponent=float(sched.get("group_exponent", 1.0)),
            )
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad schedule block: {exc}") from exc


def build_plan(cfg, r):
    mc = cfg["mc"]
    per_level = list(mc.get("per_level_samples", [10] * r))
    if len(per_level) != r:
        raise ConfigError(f"mc.per_level_samples needs {r} entries (levels 1..r), got {len(per_level)}")
    try:
        return MonteCarloPlan(int(mc["outer_samples"]), tuple(per_level), int(mc["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_sets(cfg):
    dims, sets = cfg["dims"], cfg["sets"]
    n, m, l = int(dims["x_dim"]), int(dims["y_dim"]), int(dims["set_size"])
    source, seed = sets["source"], int(sets["seed"])
    if source == "file":
        path = sets.get("path")
        if not path or not os.path.exists(path):
            raise ConfigError(f"set file not found: {path}")
        with np.load(path) as data:
            x, y = data["x_set"], data["y_set"]
            x_bar = data["x_bar_set"] if "x_bar_set" in data else None
    elif source == "sphere":
        x = build_sphere_samples(n, l, False, seed)
        y = build_sphere_samples(m, l, bool(sets["positive_orthant_y"]), seed + 1)
        x_bar = None
    elif source == "binary":
        x = build_binary_sets(n, ("random", l, seed)).vectors
        y = build_sphere_samples(m, l, bool(sets["positive_orthant_y"]), seed + 1)
        x_bar = None
    else:
        raise ConfigError(f"unknown sets.source {source!r}")
    anchor = None
    if sets["anchor"] == "soft":
        anchor = soft_anchor_family(float(sets["nu"]), float(sets["delta_bar"]))
    elif sets["anchor"] != "zero":
        raise ConfigError(f"unknown sets.anchor {sets['anchor']!r}")
    restriction = None
    if "overlap" in sets:
        # hard constraint: each anchor keeps only the X rows at this exact overlap
        anchors = x if x_bar is None else x_bar
        restriction = [restrict_overlap(x, xb, float(sets["overlap"]), allow_empty=True) for xb in anchors]
    try:
        return ConfigurationSets(x, y, x_bar_set=x_bar, anchor=anchor, restriction=restriction)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# modes; each returns (columns, rows, trailer lines, summary metric)


def _mode_psi_sweep(cfg, threads):
    schedule = build_schedule(cfg)
    plan = build_plan(cfg, schedule.r)
    sets = build_sets(cfg)
    dims = sets.dims
    tree = prepare_tree(dims, schedule, plan)
    grid = [float(t) for t in cfg["run"]["t_grid"]]
    estimates = [psi_estimate(dims, sets, schedule, t, plan, tree=tree, threads=threads) for t in grid]
    rows = psi_trace_rows(grid, estimates, plan)
    metric = rows[0]["psi"] if rows else float("nan")
    return PSI_TRACE_COLUMNS, rows, [], metric


def _mode_derivative_check(cfg, threads):
    schedule = build_schedule(cfg)
    plan = build_plan(cfg, schedule.r)
    sets = build_sets(cfg)
    grid = [float(t) for t in cfg["run"]["t_grid"]]
    try:
        report = consistency_report(sets.dims, sets, schedule, grid, plan, h=float(cfg["run"]["fd_step"]), threads=threads)
    except ValueError as exc:
        if isinstance(exc, EmptyInnerSetError):
            raise
        raise ConfigError(str(exc)) from exc
    rows = [tuple(getattr(row, c) for c in CONSISTENCY_COLUMNS) for row in report]
    passed = sum(not row.flagged for row in report)
    verdict = "pass" if passed == len(report) else "fail"
    trailer = [f"summary: {verdict} ({passed}/{len(report)} with |z| <= 3)"]
    return CONSISTENCY_COLUMNS, rows, trailer, passed / len(report) if report else float("nan")


def _instance(cfg):
    n, m = int(cfg["dims"]["x_dim"]), int(cfg["dims"]["y_dim"])
    return BinaryInstance.random(n, m, int(cfg["mc"]["seed"]))


def _mode_perceptron_census(cfg, threads):
    inst = _instance(cfg)
    try:
        census = bp_ground_state(inst)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    row = (inst.n, inst.m, inst.alpha, inst.seed, census.count, census.ground_state_energy, census.ground_state_corner)
    return CENSUS_COLUMNS, [row], [f"census_rle = {census.to_json()}"], census.count


def _mode_local_entropy(cfg, threads):
    inst = _instance(cfg)
    policy = cfg["run"]["reference_policy"]
    try:
        census = bp_ground_state(inst)
        points = local_entropy_curve(census, [int(d) for d in cfg["run"]["d_grid"]], policy)
    except EmptyInnerSetError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = local_entropy_rows(census, points)
    sig = [pt.sigma for pt in points if not pt.empty]
    return LOCAL_ENTROPY_COLUMNS, rows, [], max(sig) if sig else "empty"


def _mode_zero_temperature(cfg, threads):
    n, m, l = int(cfg["dims"]["x_dim"]), int(cfg["dims"]["y_dim"]), int(cfg["dims"]["set_size"])
    seed = int(cfg["mc"]["seed"])
    sets_cfg = cfg["sets"]
    if sets_cfg["source"] == "binary":
        x = build_binary_sets(n, ("random", l, int(sets_cfg["seed"]))).vectors
    else:
        x = build_sphere_samples(n, l, False, int(sets_cfg["seed"]))
    y = build_sphere_samples(m, l, True, int(sets_cfg["seed"]) + 1)
    g = np.random.default_rng(seed).normal(size=(m, n))
    rows = []
    for beta in cfg["run"]["beta_grid"]:
        res = zero_temperature_check(
            x, y, g, float(beta), seed=seed, outer_samples=int(cfg["mc"]["outer_samples"]), control_variate=bool(cfg["run"]["control_variate"])
        )
        rows.append(
            (float(beta), res.psi, res.psi_stderr, res.psi_scaled, res.psi_scaled_stderr, res.min_max_enum, res.gap, math.log(l) / float(beta), res.observed_sign)
        )
    return ZERO_T_COLUMNS, rows, [], rows[-1][6] if rows else float("nan")


_RUNNERS = {
    "psi_sweep": _mode_psi_sweep,
    "derivative_check": _mode_derivative_check,
    "perceptron_census": _mode_perceptron_census,
    "local_entropy": _mode_local_entropy,
    "zero_temperature": _mode_zero_temperature,
}


def _check_finite(rows):
    for row in rows:
        values = row.values() if isinstance(row, dict) else row
        for v in values:
            if isinstance(v, float) and math.isnan(v):
                raise NumericalFailure("run produced NaN output")


def execute(cfg, out_dir, threads=1):
    """Run a resolved config and write its outputs; returns ``(csv path, metric)``."""
    mode = cfg["run"]["mode"]
    columns, rows, trailer, metric = _RUNNERS[mode](cfg, threads)
    _check_finite(rows)
    header = header_lines(cfg)
    base = os.path.join(out_dir, cfg["output"]["path"])
    text = csv_text(columns, rows, header)
    text += "".join(f"# {line}\n" for line in trailer)
    atomic_write_text(base + ".csv", text)
    if cfg["output"]["format"] == "json":
        records = [dict(r) if isinstance(r, dict) else dict(zip(columns, r)) for r in rows]
        mirror = {"config": flatten(cfg), "columns": list(columns), "rows": records, "notes": trailer}
        atomic_write_text(base + ".json", json.dumps(mirror, indent=2, sort_keys=True, default=_json_default) + "\n")
    return base + ".csv", metric


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serialisable: {type(v)}")


def _sidecar(out_dir, name, message):
    path = os.path.join(out_dir, name + ".log")
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_run(config_path, out_dir, threads):
    cfg = resolve_config(load_config(config_path))
    out_dir = out_dir or cfg["output"].get("dir", ".")
    _sidecar(out_dir, cfg["output"]["path"], f"start run {config_path}")
    path, _ = execute(cfg, out_dir, threads)
    _sidecar(out_dir, cfg["output"]["path"], f"wrote {path}")
    return path


def parse_value(text):
    """Interpret one override value as a TOML literal, falling back to a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _get(cfg, dotted):
    parts = dotted.split(".")
    if len(parts) != 2 or parts[0] not in KNOWN_KEYS or parts[1] not in KNOWN_KEYS[parts[0]]:
        raise ConfigError(f"unknown key {dotted!r}")
    return cfg.setdefault(parts[0], {}), parts[1]


def cmd_sweep(config_path, key, values, out_dir, threads):
    raw = load_config(config_path)
    base_cfg = resolve_config(raw)
    node, leaf = _get(base_cfg, key)
    if isinstance(node.get(leaf), (list, dict)) or leaf in ("t_grid", "beta_grid", "d_grid", "per_level_samples"):
        raise ConfigError(f"sweep key {key!r} is not a scalar")
    out_dir = out_dir or base_cfg["output"].get("dir", ".")
    base_seed = int(base_cfg["mc"]["seed"])
    mode = base_cfg["run"]["mode"]
    metric_name = SUMMARY_METRIC[mode]
    rows = []
    for idx, value in enumerate(values):
        block, leaf = key.split(".")
        override = copy.deepcopy(raw)
        override.setdefault(block, {})[leaf] = value
        if key != "mc.seed":
            override.setdefault("mc", {})["seed"] = base_seed + idx
        cfg = resolve_config(override)
        cfg["output"]["path"] = f"{base_cfg['output']['path']}_{idx:03d}"
        status = EXIT_OK
        try:
            path, metric = execute(cfg, out_dir, threads)
        except (EmptyInnerSetError, NumericalFailure, FloatingPointError) as exc:
            status, path, metric = EXIT_NUMERICAL, "", "failed"
            log.error("sweep entry %d failed: %s", idx, exc)
        rows.append((idx, json.dumps(value), cfg["mc"]["seed"], status, os.path.basename(path), metric))
    columns = ("index", "value", "seed", "exit_status", "output", metric_name)
    trailer = []
    if mode == "derivative_check":
        passing = sum(1 for r in rows if r[3] == EXIT_OK and r[5] == 1.0)
        trailer.append(f"pass_fraction = {passing / len(rows) if rows else float('nan')!r}")
    text = csv_text(columns, rows, header_lines(base_cfg) + [f"sweep.key = {json.dumps(key)}"])
    text += "".join(f"# {line}\n" for line in trailer)
    summary = os.path.join(out_dir, f"{base_cfg['output']['path']}_summary.csv")
    atomic_write_text(summary, text)
    _sidecar(out_dir, base_cfg["output"]["path"], f"sweep {key} over {len(values)} values -> {summary}")
    return summary


def build_parser():
    parser = argparse.ArgumentParser(prog="fllab", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="worker threads (speed only, never results)")
    parser.add_argument("--out", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config")
    p_sweep = sub.add_parser("sweep", help="run a config once per override value")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--key", required=True, help="dotted scalar key, e.g. schedule.beta")
    p_sweep.add_argument("--values", default="", help="comma-separated values")
    for p in (p_run, p_sweep):
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        p.add_argument("--out", default=argparse.SUPPRESS)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    threads = max(1, int(args.threads))
    try:
        if args.command == "run":
            path = cmd_run(args.config, args.out, threads)
        else:
            values = [parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
            path = cmd_sweep(args.config, args.key, values, args.out, threads)
    except (ConfigError, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmptyInnerSetError, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(path)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
