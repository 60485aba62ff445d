"""Command-line front end: simulate | fit | curves | shift | sensitivity | compare.

Configs are JSON documents with strictly validated keys; results are JSON and
CSV files whose bytes depend only on (config, seed).  Every output embeds the
tool version and a hash of the effective config; wall-clock timestamps are
confined to run_metadata.json.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FIT = 3
EXIT_IO = 4

_META_KEYS = {"config_hash", "tool_version"}


def _fail(code: int, kind: str, msg: str) -> int:
    msg = str(msg).replace("\n", " ")
    sys.stderr.write(f'thresholdcurves: error code={code} kind={kind} msg="{msg}"\n')
    return code


def _canonical(doc: dict) -> str:
    return json.dumps({k: v for k, v in doc.items() if k not in _META_KEYS},
                      sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    return hashlib.sha256(_canonical(doc).encode("utf-8")).hexdigest()[:16]


def _check_keys(doc: dict, allowed: set, where: str):
    from .errors import ConfigError

    unknown = set(doc) - allowed - _META_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _load_config(path) -> dict:
    from .errors import ConfigError

    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _write_json(path, doc: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_table(path, header, rows, meta: str):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {meta}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def _meta_line(cfg_hash: str) -> str:
    from . import __version__

    return f"tool_version={__version__} config_hash={cfg_hash}"


def _resolve_schema(doc, base_dir):
    from .data import ColumnSchema
    from .errors import ConfigError

    if isinstance(doc, str):
        return ColumnSchema.load(os.path.join(base_dir, doc) if not os.path.isabs(doc) else doc)
    if isinstance(doc, dict):
        return ColumnSchema.from_json(doc)
    raise ConfigError("schema must be a path or an inline object")


def _load_dataset(cfg: dict, base_dir: str):
    from .data import LoadOptions, load_csv
    from .errors import ConfigError

    if "data" not in cfg or "schema" not in cfg:
        raise ConfigError("config needs 'data' and 'schema'")
    schema = _resolve_schema(cfg["schema"], base_dir)
    opts_doc = cfg.get("load_options", {})
    _check_keys(opts_doc, {"impute_median", "standardize", "t_floor"}, "load_options")
    opts = LoadOptions(
        impute_median=bool(opts_doc.get("impute_median", True)),
        standardize=bool(opts_doc.get("standardize", True)),
        t_floor=float(opts_doc.get("t_floor", 1e-4)),
    )
    path = cfg["data"]
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    return load_csv(path, schema, opts), schema


def _controls_from(cfg: dict, seed: int):
    from .emfit import FitControls

    doc = cfg.get("controls", {})
    _check_keys(doc, {"max_iter", "rel_tol", "n_starts", "seed",
                      "inner_max_iter", "inner_gtol"}, "controls")
    return FitControls(
        max_iter=int(doc.get("max_iter", 500)),
        rel_tol=float(doc.get("rel_tol", 1e-8)),
        n_starts=int(doc.get("n_starts", 5)),
        seed=int(doc.get("seed", seed)),
        inner_max_iter=int(doc.get("inner_max_iter", 200)),
        inner_gtol=float(doc.get("inner_gtol", 1e-6)),
    )


def _grid_from(cfg: dict):
    import numpy as np

    from .effects import DEFAULT_GRID_HOURS
    from .errors import ConfigError

    doc = cfg.get("grid")
    if doc is None:
        return DEFAULT_GRID_HOURS
    if isinstance(doc, list):
        return np.asarray(doc, dtype=float)
    if isinstance(doc, dict):
        _check_keys(doc, {"start", "stop", "step"}, "grid")
        return np.round(
            np.arange(float(doc["start"]), float(doc["stop"]) + 1e-9, float(doc["step"])), 10
        )
    raise ConfigError("grid must be a list of times or {start, stop, step}")


def _curve_rows(curve):
    return list(curve.rows())


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict, out: str, seed: int, base_dir: str) -> None:
    import numpy as np
    from dataclasses import replace

    from . import simlab
    from .data import write_csv
    from .errors import ConfigError
    from .latentmodel import LatentModelParams

    _check_keys(cfg, {"scenario", "n", "seed", "params", "x_kinds", "z_kinds"}, "simulate config")
    n = int(cfg.get("n", 20_000))
    scenario = cfg.get("scenario")
    if scenario == "reference":
        sim = simlab.reference_scenario(n=n, seed=seed)
    elif scenario == "confounded":
        sim = simlab.confounded_scenario(n=n, seed=seed)
    elif scenario is None and "params" in cfg:
        x_kinds = tuple(cfg["x_kinds"])
        z_kinds = tuple(cfg["z_kinds"])
        probe = simlab.SimConfig(
            n=n, x_kinds=x_kinds, z_kinds=z_kinds, seed=seed,
            params=_params_template(len(x_kinds), z_kinds),
        )
        params = LatentModelParams.from_json(cfg["params"], probe.schema())
        sim = replace(probe, params=params)
    else:
        raise ConfigError("simulate needs scenario 'reference'/'confounded' or explicit params")

    ds, truth = simlab.simulate_dataset(sim)
    meta = _meta_line(config_hash(cfg))
    write_csv(os.path.join(out, "data.csv"), ds, header_comment=meta)
    _write_table(
        os.path.join(out, "truth.csv"), ["row", "h"],
        [(i, int(truth.h[i])) for i in range(ds.n)], meta,
    )
    _write_json(os.path.join(out, "schema.json"), ds.schema.to_json())


def _params_template(k: int, z_kinds):
    import numpy as np

    from .latentmodel import LatentModelParams, ZComponentParams

    return LatentModelParams(
        eta_h=np.zeros(1 + k),
        z_models=tuple(
            ZComponentParams(kind, np.zeros(k + 2), 0.0 if kind == "continuous" else None)
            for kind in z_kinds
        ),
        beta_b=np.zeros(1 + k),
        beta_c=np.zeros(1 + k + len(z_kinds)),
        delta=np.zeros(2),
        cell_logits=np.zeros((2, 2)),
    )


def cmd_fit(cfg: dict, out: str, seed: int, base_dir: str) -> None:
    from . import emfit

    _check_keys(cfg, {"data", "schema", "load_options", "controls", "seed"}, "fit config")
    ds, schema = _load_dataset(cfg, base_dir)
    controls = _controls_from(cfg, seed)
    result = emfit.fit(ds, controls=controls)
    h = config_hash(cfg)
    doc = {
        "fit": result.to_json(schema),
        "schema": schema.to_json(),
        "config_hash": h,
        "tool_version": _version(),
    }
    _write_json(os.path.join(out, "fit.json"), doc)
    _write_table(
        os.path.join(out, "trace.csv"), ["iteration", "loglik"],
        [(i + 1, float(v)) for i, v in enumerate(result.loglik_trace)], _meta_line(h),
    )


def _version() -> str:
    from . import __version__

    return __version__


def _load_fit(cfg: dict, base_dir: str):
    from .data import ColumnSchema
    from .emfit import FitResult
    from .errors import ConfigError

    if "fit" not in cfg:
        raise ConfigError("config needs 'fit' (path to fit.json)")
    path = cfg["fit"]
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    schema = ColumnSchema.from_json(doc["schema"])
    return FitResult.from_json(doc["fit"], schema), schema


def cmd_curves(cfg: dict, out: str, seed: int, base_dir: str) -> None:
    from . import effects

    _check_keys(cfg, {"data", "schema", "load_options", "fit", "grid", "level", "seed"},
                "curves config")
    ds, _ = _load_dataset(cfg, base_dir)
    fit, _ = _load_fit(cfg, base_dir)
    grid = _grid_from(cfg)
    level = float(cfg.get("level", 0.95))
    meta = _meta_line(config_hash(cfg))
    header = ["t_hours", "estimate", "se", "lo", "hi"]

    theta = effects.theta_curve(fit, ds, grid, level=level)
    gamma = effects.gamma_curve(fit, ds, grid, level=level)
    err0, err1, err_total = effects.error_curves(fit, ds, grid, level=level)
    for name, curve in (("theta", theta), ("gamma", gamma), ("err0", err0),
                        ("err1", err1), ("err_total", err_total)):
        _write_table(os.path.join(out, f"{name}.csv"), header, _curve_rows(curve), meta)


def cmd_shift(cfg: dict, out: str, seed: int, base_dir: str) -> None:
    from . import effects

    _check_keys(cfg, {"data", "schema", "load_options", "fit", "deltas_minutes",
                      "floor_minutes", "weight_mode", "level", "seed"}, "shift config")
    ds, _ = _load_dataset(cfg, base_dir)
    fit, _ = _load_fit(cfg, base_dir)
    deltas = [float(v) for v in cfg.get("deltas_minutes", [-30.0, -15.0, 0.0, 15.0, 30.0])]
    floor = float(cfg.get("floor_minutes", 5.0))
    policies = [effects.ShiftPolicy(d, floor) for d in deltas]
    res = effects.shift_estimates(
        fit, ds, policies,
        weight_mode=cfg.get("weight_mode", "full_posterior"),
        level=float(cfg.get("level", 0.95)),
    )
    doc = res.to_json()
    doc["config_hash"] = config_hash(cfg)
    doc["tool_version"] = _version()
    _write_json(os.path.join(out, "shift.json"), doc)


def cmd_sensitivity(cfg: dict, out: str, seed: int, base_dir: str) -> None:
    from . import sensitivity as sens

    _check_keys(cfg, {"data", "schema", "load_options", "controls", "psi0", "psi1",
                      "times_hours", "level", "seed"}, "sensitivity config")
    ds, _ = _load_dataset(cfg, base_dir)
    controls = _controls_from(cfg, seed)
    psi0 = [float(v) for v in cfg.get("psi0", sens.PSI_GRID_VALUES)]
    psi1 = [float(v) for v in cfg.get("psi1", sens.PSI_GRID_VALUES)]
    grid = [sens.PsiConfig(a, b) for a in psi0 for b in psi1]
    times = tuple(float(v) for v in cfg.get("times_hours", (0.5, 1.0, 2.0, 3.0)))
    rows = sens.sensitivity_table(ds, grid, times=times, controls=controls,
                                  level=float(cfg.get("level", 0.95)))
    _write_table(
        os.path.join(out, "sensitivity.csv"),
        ["psi0", "psi1", "t_hours", "estimate", "se", "lo", "hi", "converged"],
        [(r.psi0, r.psi1, r.t_hours, r.estimate, r.se, r.lo, r.hi, r.converged)
         for r in rows],
        _meta_line(config_hash(cfg)),
    )


def cmd_compare(cfg: dict, out: str, seed: int, base_dir: str) -> None:
    import numpy as np

    from . import comparators, effects, emfit
    from .errors import ConfigError

    _check_keys(cfg, {"data", "schema", "load_options", "controls", "estimators",
                      "grid", "level", "seed"}, "compare config")
    ds, _ = _load_dataset(cfg, base_dir)
    controls = _controls_from(cfg, seed)
    grid = _grid_from(cfg)
    level = float(cfg.get("level", 0.95))
    known = ("full", "no_latent_brownian", "lognormal", "no_latent_lognormal", "gps")
    estimators = cfg.get("estimators", list(known))
    bad = [e for e in estimators if e not in known]
    if bad:
        raise ConfigError(f"unknown estimators {bad}; choose from {known}")

    h = config_hash(cfg)
    meta = _meta_line(h)
    header = ["t_hours", "estimate", "se", "lo", "hi"]
    curves: dict[str, dict[str, object]] = {}
    for est in estimators:
        if est == "full":
            fit = emfit.fit(ds, controls=controls)
            pair = {
                "theta": effects.theta_curve(fit, ds, grid, level=level),
                "gamma": effects.gamma_curve(fit, ds, grid, level=level),
            }
        elif est == "no_latent_brownian":
            res = comparators.no_latent_variant("brownian", ds, grid, controls, level=level)
            pair = {"theta": res.theta, "gamma": res.gamma}
        elif est == "no_latent_lognormal":
            res = comparators.no_latent_variant("lognormal", ds, grid, controls, level=level)
            pair = {"theta": res.theta, "gamma": res.gamma}
        elif est == "lognormal":
            fit = comparators.lognormal_fit(ds, controls=controls)
            pair = {
                "theta": comparators.lognormal_curve(fit, ds, grid, "theta", level=level),
                "gamma": comparators.lognormal_curve(fit, ds, grid, "gamma", level=level),
            }
        else:  # gps
            fit = comparators.gps_fit(ds)
            pair = {
                "theta": comparators.gps_curve(fit, ds, grid, target="decision", level=level),
                "gamma": comparators.gps_curve(fit, ds, grid, target="outcome", level=level),
            }
        curves[est] = pair
        for kind, curve in pair.items():
            _write_table(os.path.join(out, f"{kind}_{est}.csv"), header,
                         _curve_rows(curve), meta)

    summary = {
        "grid_hours": [float(v) for v in grid],
        "estimators": list(estimators),
        "config_hash": h,
        "tool_version": _version(),
        "estimates": {
            est: {kind: [float(v) for v in pair[kind].estimate] for kind in pair}
            for est, pair in curves.items()
        },
    }
    if "full" in curves:
        summary["deltas_vs_full"] = {
            est: {
                kind: [
                    float(v - w)
                    for v, w in zip(pair[kind].estimate, curves["full"][kind].estimate)
                ]
                for kind in pair
            }
            for est, pair in curves.items()
            if est != "full"
        }
    _write_json(os.path.join(out, "summary.json"), summary)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "curves": cmd_curves,
    "shift": cmd_shift,
    "sensitivity": cmd_sensitivity,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thresholdcurves",
        description="Latent-class threshold regression for time-to-decision response curves",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap the numeric worker pool")
    return parser


def _limit_threads(n: int | None):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)

    from .errors import (
        ConfigError,
        FitError,
        ParameterDomainError,
        SchemaError,
        ShapeError,
        TimeDomainError,
        ValidationError,
    )

    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = int(args.seed)
        seed = int(cfg.get("seed", 0))
        os.makedirs(args.out, exist_ok=True)
        base_dir = os.path.dirname(os.path.abspath(args.config))

        COMMANDS[args.command](cfg, args.out, seed, base_dir)

        echo = dict(cfg)
        echo["config_hash"] = config_hash(cfg)
        echo["tool_version"] = _version()
        _write_json(os.path.join(args.out, "config_echo.json"), echo)
        _write_json(
            os.path.join(args.out, "run_metadata.json"),
            {
                "command": args.command,
                "config_hash": config_hash(cfg),
                "tool_version": _version(),
                "timestamp_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            },
        )
        return EXIT_OK
    except (ConfigError, SchemaError, ValidationError, ShapeError,
            ParameterDomainError, TimeDomainError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except FitError as exc:
        return _fail(EXIT_FIT, "fit", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)


if __name__ == "__main__":
    sys.exit(main())
