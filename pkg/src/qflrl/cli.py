"""Command-line runner: ``qflrl run|validate|list-experiments``.

Configs are TOML files with top-level ``experiment``, ``seed`` and ``out_dir``
plus the experiment's parameters; nested tables (``[sme]``) map to dotted keys
(``sme.kappa``). ``--key=value`` overrides win over the file.

Exit codes: 0 success, 1 invalid config (validate), 2 config/parse error,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import autoenc, qsim
from .experiments import REGISTRY, ConfigError, build_params, flatten, jsonable

FORMAT_VERSION = 1
RESERVED = ("experiment", "seed", "out_dir")

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def _flatten_table(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten_table(v, prefix + k + "."))
        else:
            out[prefix + k] = v
    return out


def parse_value(text):
    """TOML literal if it parses as one, otherwise the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(extra):
    """['--a.b=1', '--c', 'x'] -> {'a.b': 1, 'c': 'x'}"""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, text = tok[2:].split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} has no value")
            key, text = tok[2:], extra[i + 1]
            i += 1
        out[key.replace("-", "_")] = parse_value(text)
        i += 1
    return out


def load_config(source, overrides=None):
    """Resolve a tag or TOML path plus overrides into a flat table (reserved keys included)."""
    if source in REGISTRY:
        table = {"experiment": source}
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"{source!r} is neither an experiment tag nor a config file")
        try:
            table = _flatten_table(tomllib.loads(path.read_text()))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse {source}: {e}") from None
    table.update(overrides or {})
    return table


def resolve(table):
    """Flat table -> (experiment, params, seed, out_dir, defaults_applied)."""
    tag = table.get("experiment")
    if tag not in REGISTRY:
        raise ConfigError(f"unknown experiment {tag!r}; choose from {', '.join(REGISTRY)}")
    exp = REGISTRY[tag]
    seed = table.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    out_dir = table.get("out_dir", f"runs/{tag}-seed{seed}")
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")
    given = {k: v for k, v in table.items() if k not in RESERVED}
    params, applied = build_params(exp.params, given)
    return exp, params, seed, out_dir, applied


def resolve_threads(flag):
    env = os.environ.get("QFLRL_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"QFLRL_THREADS must be an integer, got {env!r}") from None
    else:
        n = flag if flag is not None else (os.cpu_count() or 1)
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


# ------------------------------------------------------------------- writers

def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_metrics_csv(path, rows):
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r[k]) if k in r else "" for k in cols])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _all_finite(v):
    if isinstance(v, dict):
        return all(_all_finite(x) for x in v.values())
    if isinstance(v, (list, tuple)):
        return all(_all_finite(x) for x in v)
    if isinstance(v, float):
        return math.isfinite(v)
    return True


class NumericalAbort(FloatingPointError):
    pass


def error_record(kind, message, code, **extra):
    return {"format_version": FORMAT_VERSION, "status": "error", "kind": kind,
            "message": message, "exit_code": code, **extra}


def _fail(record, out_dir=None):
    print(json.dumps(record), file=sys.stderr)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_json(Path(out_dir) / "error.json", record)
        except OSError:
            pass
    return record["exit_code"]


# -------------------------------------------------------------- subcommands

def cmd_run(args, extra):
    out_dir = None
    try:
        overrides = parse_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out_dir is not None:
            overrides["out_dir"] = args.out_dir
        table = load_config(args.config, overrides)
        exp, params, seed, out_dir, applied = resolve(table)
        bad = exp.check(params) if exp.check else []
        if bad:
            raise ConfigError("; ".join(bad))
        threads = resolve_threads(args.threads)
    except ConfigError as e:
        return _fail(error_record("config", str(e), EXIT_CONFIG), out_dir)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        with ThreadPoolExecutor(threads) as pool:
            outcome = exp.run(params, seed, pool.map)
        summary_metrics = jsonable(outcome.summary)
        if not _all_finite(summary_metrics):
            raise NumericalAbort("non-finite headline metric")
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as e:
        diag = {"exception": type(e).__name__, "experiment": exp.tag, "seed": seed}
        return _fail(error_record("numerical", str(e), EXIT_NUMERICAL, diagnostics=diag), out)
    except (ValueError, ConfigError) as e:
        return _fail(error_record("config", str(e), EXIT_CONFIG), out)
    wall = time.perf_counter() - t0

    write_metrics_csv(out / "metrics.csv", [jsonable(r) for r in outcome.metrics])
    if outcome.checkpoint is not None:
        write_json(out / "checkpoint.json", {"format_version": FORMAT_VERSION,
                                             "experiment": exp.tag, "seed": seed,
                                             "state": jsonable(outcome.checkpoint)})
    for name, img in outcome.images.items():
        autoenc.write_pgm(out / f"{name}.pgm", img)
    if outcome.trajectories:
        qsim.write_trajectory_csv(out / "trajectories.csv", **outcome.trajectories)
    summary = {"format_version": FORMAT_VERSION, "experiment": exp.tag, "seed": seed,
               "config": jsonable(flatten(params)), "defaults_applied": applied,
               "metrics": summary_metrics, "threads": threads, "wall_clock_seconds": wall}
    write_json(out / "summary.json", summary)
    print(json.dumps({"experiment": exp.tag, "out_dir": str(out), "metrics": summary_metrics}))
    return EXIT_OK


def validate_table(table):
    """Report dict for one resolved table."""
    exp, params, seed, out_dir, applied = resolve(table)
    bad = list(exp.check(params)) if exp.check else []
    flat = jsonable(flatten(params))
    return {"experiment": exp.tag, "valid": not bad, "violations": bad, "seed": seed,
            "out_dir": out_dir, "config": flat,
            "defaults_applied": {k: flat[k] for k in applied}}


def cmd_validate(args, extra):
    try:
        overrides = parse_overrides(extra)
        table = load_config(args.config, overrides)
    except ConfigError as e:
        print(json.dumps({"valid": False, "violations": [str(e)]}, indent=2))
        return EXIT_CONFIG
    try:
        if "experiment" not in table:
            unknown = sorted(set(table) - set(RESERVED))
            if unknown:
                raise ConfigError(f"keys given without an experiment: {', '.join(unknown)}")
            reports = [validate_table({**table, "experiment": tag}) for tag in REGISTRY]
            report = {"valid": all(r["valid"] for r in reports), "experiments": reports}
        else:
            report = validate_table(table)
    except ConfigError as e:
        print(json.dumps({"valid": False, "violations": [str(e)]}, indent=2))
        return EXIT_CONFIG
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["valid"] else EXIT_INVALID


def cmd_list(args, extra):
    if extra:
        print(f"unexpected arguments: {' '.join(extra)}", file=sys.stderr)
        return EXIT_CONFIG
    width = max(len(t) for t in REGISTRY)
    for tag, exp in REGISTRY.items():
        print(f"{tag:<{width}}  {exp.description}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="qflrl", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment (tag or config.toml)")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir", dest="out_dir")
    run.add_argument("--threads", type=int)
    run.set_defaults(func=cmd_run)
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.set_defaults(func=cmd_validate)
    ls = sub.add_parser("list-experiments", help="list experiment tags")
    ls.set_defaults(func=cmd_list)
    return ap


def main(argv=None):
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    return args.func(args, extra)


if __name__ == "__main__":
    sys.exit(main())
