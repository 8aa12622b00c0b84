"""Command-line entry point: ``spatialcvm {calibrate,test,baseline,simulate,mvn}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baselines import anova_oneway, kruskal_wallis, manova_pillai
from .calibration import CalibrationCache, CalibrationConfig, CalibrationResult, calibrate
from .errors import ConfigError, InvalidDataError, SpatialCvMError
from .lattice import build_lattice
from .mvn import DEFAULT_SEED, DEFAULT_TOL, mvn_cdf
from .rank_test import FieldDataset, run_test
from .simulation import SimulationConfig, monte_carlo

log = logging.getLogger("spatialcvm")

REQUIRED = object()
CACHE_ENV = "SPATIALCVM_CACHE_DIR"
DEFAULT_CACHE_DIR = ".spatialcvm_cache"

CALIBRATE_KEYS = {
    "grid_size": 20,
    "h": 0.5,
    "s0": [0.5, 0.5],
    "kernel_id": "gaussian",
    "phi": REQUIRED,
    "rho": 0.5,
    "p": 2,
    "M_per_dim": 5,
    "K": 3,
    "tol": DEFAULT_TOL,
    "seed": DEFAULT_SEED,
    "quantum": None,
}

SIMULATE_KEYS = {
    "K": 3,
    "grid_size": 20,
    "p": 2,
    "n_replicates": 500,
    "alpha": 0.05,
    "phis": [0.01, 0.2, 0.5],
    "deltas": [0.0, 0.15, 0.30, 0.45],
    "rho": 0.5,
    "h": 0.5,
    "s0": [0.5, 0.5],
    "M_per_dim": 5,
    "seed": DEFAULT_SEED,
    "methods": None,
    "kernel_id": "gaussian",
    "tol": DEFAULT_TOL,
}

MVN_KEYS = {
    "dim": REQUIRED,
    "upper": REQUIRED,
    "corr": REQUIRED,
    "tol": DEFAULT_TOL,
    "seed": DEFAULT_SEED,
}

SCHEMAS = {"calibrate": CALIBRATE_KEYS, "simulate": SIMULATE_KEYS, "mvn": MVN_KEYS}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def parse_value(text: str):
    """Flag values: JSON if it parses, comma-separated list of JSON otherwise, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(part.strip()) for part in text.split(",")]
    return text


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def parse_config(subcommand: str, path=None, flags: dict | None = None):
    """Merge defaults, file values and flags (flags win).

    Returns ``(resolved, provenance)`` where provenance keeps the raw file
    and flag values for the manifest.
    """
    schema = SCHEMAS[subcommand]
    file_values = load_config_file(path) if path else {}
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    unknown = sorted((set(file_values) | set(flags)) - set(schema))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    resolved = {}
    for key, default in schema.items():
        if key in flags:
            resolved[key] = flags[key]
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = default
    missing = sorted(k for k, v in resolved.items() if v is REQUIRED)
    if missing:
        raise ConfigError(f"missing required configuration keys: {', '.join(missing)}")
    return resolved, {"file": str(path) if path else None, "file_values": file_values, "flag_values": flags}


def _cache_dir(args) -> Path:
    return Path(args.cache_dir or os.environ.get(CACHE_ENV) or DEFAULT_CACHE_DIR)


def _fmt(x) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# data input
# ---------------------------------------------------------------------------

def read_field_csv(path) -> tuple[FieldDataset, list[str]]:
    """Read ``field,x,y,v1[,v2]`` rows into a dataset on the implied square lattice."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InvalidDataError(f"cannot read data file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:3] != ["field", "x", "y"] or len(header) < 4:
            raise InvalidDataError(f"{path}: header must be field,x,y,v1[,v2], got {','.join(header)}")
        p = len(header) - 3
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InvalidDataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise InvalidDataError(f"{path}:{lineno}: {exc}") from exc
            rows.append((row[0].strip(), vals))

    labels = list(dict.fromkeys(r[0] for r in rows))
    if len(labels) < 2:
        raise InvalidDataError(f"{path}: need at least two fields, found {len(labels)}")
    per_field = len(rows) // len(labels)
    g = int(round(np.sqrt(per_field)))
    if g * g != per_field or per_field * len(labels) != len(rows) or g < 2:
        raise InvalidDataError(f"{path}: rows do not form {len(labels)} complete square lattices")
    lattice = build_lattice(g)
    values = np.full((len(labels), g * g, p), np.nan)
    seen = np.zeros((len(labels), g * g), dtype=bool)
    index = {lab: i for i, lab in enumerate(labels)}
    for lab, vals in rows:
        x, y = vals[0], vals[1]
        j = int(round(x * (g - 1))) + g * int(round(y * (g - 1)))
        if not (0 <= j < g * g) or np.hypot(*(lattice.coords[j] - (x, y))) > 1e-9:
            raise InvalidDataError(f"{path}: coordinate ({x}, {y}) is not a lattice site")
        k = index[lab]
        if seen[k, j]:
            raise InvalidDataError(f"{path}: site ({x}, {y}) appears twice in field {lab}")
        seen[k, j] = True
        values[k, j] = vals[2:]
    return FieldDataset(values, lattice), labels


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _calibration_config(resolved) -> CalibrationConfig:
    try:
        return CalibrationConfig(**{k: v for k, v in resolved.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_calibrate(args, ctx):
    resolved, prov = parse_config("calibrate", args.config, _schema_flags(args, CALIBRATE_KEYS))
    ctx["config"], ctx["provenance"] = resolved, prov
    cfg = _calibration_config(resolved)
    cache = ctx["cache"] = CalibrationCache(_cache_dir(args))
    result = calibrate(cfg, cache=cache, threads=args.threads)
    out = args.out or sys.stdout
    lines = [
        f"a {_fmt(result.a)}",
        f"nu {_fmt(result.nu)}",
        f"sum_lambda {_fmt(float(np.sum(result.eigenvalues)))}",
        f"n_eigenvalues {result.eigenvalues.size}",
        f"cache {'hit' if cache.hits else 'miss'} {cache.path_for(cfg)}",
    ]
    _emit("\n".join(lines) + "\n", out)
    return 0


def _load_calibration(source, args, ctx) -> CalibrationResult:
    rec = load_config_file(source)
    if "format_version" in rec:
        try:
            return CalibrationResult.from_record(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: invalid calibration record: {exc}") from exc
    resolved, prov = parse_config("calibrate", source, {})
    ctx["provenance"] = prov
    cache = ctx["cache"] = CalibrationCache(_cache_dir(args))
    return calibrate(_calibration_config(resolved), cache=cache, threads=args.threads)


def cmd_test(args, ctx):
    data, labels = read_field_csv(args.data)
    calib = _load_calibration(args.calibration, args, ctx)
    ctx["config"] = {"data": str(args.data), "calibration": str(args.calibration),
                     "calibration_metadata": calib.config.as_dict(), "seed": calib.config.seed}
    result = run_test(data, calib)
    rec = result.to_record()
    rec["fields"] = labels
    _emit(json.dumps(rec, indent=1) + "\n", args.out or sys.stdout)
    return 0


def cmd_baseline(args, ctx):
    data, labels = read_field_csv(args.data)
    ctx["config"] = {"data": str(args.data)}
    groups = list(data.values)
    rec = {"fields": labels, "p": data.p}
    kw = [kruskal_wallis([g[:, j] for g in groups]) for j in range(data.p)]
    rec["kruskal_wallis"] = [{"H": r.statistic, "p_value": r.pvalue} for r in kw]
    rec["kw_bonferroni_p_value"] = min(1.0, min(r.pvalue for r in kw) * data.p)
    if data.p == 1:
        an = anova_oneway([g[:, 0] for g in groups])
        rec["anova"] = {"F": an.statistic, "p_value": an.pvalue}
    else:
        ma = manova_pillai(groups)
        rec["manova_pillai"] = {"pillai": ma.statistic, "F": ma.df[0], "df1": ma.df[1],
                                "df2": ma.df[2], "p_value": ma.pvalue}
    _emit(json.dumps(rec, indent=1) + "\n", args.out or sys.stdout)
    return 0


def cmd_simulate(args, ctx):
    resolved, prov = parse_config("simulate", args.config, _schema_flags(args, SIMULATE_KEYS))
    ctx["config"], ctx["provenance"] = resolved, prov
    try:
        cfg = SimulationConfig(**resolved)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cache = ctx["cache"] = CalibrationCache(_cache_dir(args))
    table = monte_carlo(cfg, cache=cache, threads=args.threads, calibration_threads=args.threads)
    ctx["extra"] = {
        "rows": [
            {"phi": r.phi, "delta": r.delta, "method": r.method,
             "n_effective_replicates": r.n_effective_replicates, "n_failed": r.n_failed}
            for r in table.rows
        ],
        "errors": table.errors,
    }
    out = args.out or "spatial_rank_results.csv"
    _emit(table.to_csv(), out)
    if out is not sys.stdout and str(out) != "-":
        print(f"wrote {len(table.rows)} rows to {out}")
    return 4 if table.errors else 0


def cmd_mvn(args, ctx):
    resolved, prov = parse_config("mvn", args.config, _schema_flags(args, MVN_KEYS))
    ctx["config"], ctx["provenance"] = resolved, prov
    dim = int(resolved["dim"])
    upper = np.atleast_1d(np.asarray(resolved["upper"], dtype=float))
    corr = np.asarray(resolved["corr"], dtype=float)
    if corr.ndim == 0:
        corr = corr.reshape(1)
    if upper.size != dim:
        raise ConfigError(f"upper has {upper.size} entries, expected dim={dim}")
    if corr.ndim == 1:
        corr = _corr_from_entries(corr, dim)
    prob = mvn_cdf(upper, corr, tol=float(resolved["tol"]), seed=int(resolved["seed"]))
    _emit(f"{prob:.12g}\n", args.out or sys.stdout)
    return 0


def _corr_from_entries(entries, dim):
    """Full row-major matrix, or the strict upper triangle row by row."""
    if entries.size == dim * dim:
        return entries.reshape(dim, dim)
    if entries.size == dim * (dim - 1) // 2:
        R = np.eye(dim)
        R[np.triu_indices(dim, 1)] = entries
        return R + np.triu(R, 1).T
    raise ConfigError(f"corr needs {dim * dim} or {dim * (dim - 1) // 2} entries, got {entries.size}")


def _emit(text, out):
    if out is sys.stdout or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def _flag(key):
    return "--" + key.replace("_", "-")


def _add_schema_flags(parser, schema):
    for key in schema:
        parser.add_argument(_flag(key), dest=f"cfg_{key}", type=parse_value, default=None, metavar="VALUE")


def _schema_flags(args, schema):
    return {k: getattr(args, f"cfg_{k}") for k in schema}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialcvm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output path (default: stdout)")
        p.add_argument("--manifest", help="run manifest path")
        p.add_argument("--cache-dir", help=f"calibration cache directory (env {CACHE_ENV})")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("calibrate", help="compute and cache (a, nu) for one configuration")
    common(p)
    _add_schema_flags(p, CALIBRATE_KEYS)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("test", help="run the spatial CvM test on a CSV dataset")
    common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--calibration", required=True, help="calibration record or calibration config (JSON)")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("baseline", help="Kruskal-Wallis, ANOVA / MANOVA on a CSV dataset")
    common(p, config=False)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("simulate", help="Monte Carlo size/power study")
    common(p)
    _add_schema_flags(p, SIMULATE_KEYS)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mvn", help="multivariate normal orthant probability (debug)")
    common(p)
    _add_schema_flags(p, MVN_KEYS)
    p.set_defaults(func=cmd_mvn)
    return parser


def _manifest_path(args) -> Path:
    return Path(args.manifest) if args.manifest else Path(f"spatialcvm-{args.command}-manifest.json")


def dispatch(args) -> int:
    ctx: dict = {"cache": None}
    start = time.perf_counter()
    status, error = 0, None
    try:
        status = args.func(args, ctx)
    except SpatialCvMError as exc:
        status, error = exc.exit_code, exc
    except Exception as exc:  # unexpected failures are reported as numeric errors
        log.debug("unexpected failure", exc_info=True)
        status, error = 4, exc
    if error is not None:
        record = {"error": type(error).__name__, "message": str(error), "exit_code": status}
        sys.stderr.write(json.dumps(record) + "\n")

    cache = ctx.get("cache")
    config = ctx.get("config")
    manifest = {
        "subcommand": args.command,
        "artifact_version": __version__,
        "resolved_config": config,
        "provenance": ctx.get("provenance"),
        "seed": (config or {}).get("seed") if isinstance(config, dict) else None,
        "threads": args.threads,
        "duration_seconds": time.perf_counter() - start,
        "cache": {"hits": cache.hits, "misses": cache.misses} if cache else None,
        "exit_code": status,
        "error": None if error is None else str(error),
        "environment": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
    }
    if ctx.get("extra"):
        manifest["details"] = ctx["extra"]
    try:
        _manifest_path(args).write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    except OSError as exc:
        log.warning("could not write manifest: %s", exc)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
