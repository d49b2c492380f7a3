"""Command-line entry point: single-dataset estimation, simulation sweeps,
and propensity diagnostics.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
Every output records the master seed it was generated from.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from .dgm import SCENARIO_GRID, Dataset, ScenarioConfig, dataset_to_csv, simulate_dataset
from .rng import derive_substream
from .simulation import (
    ESTIMATOR_ROLE,
    METHOD_DEFS,
    METHOD_ORDER,
    compute_metrics,
    ps_diagnostics,
    run_grid,
    write_figure_csv,
    write_rep_csv,
    write_summary_json,
)
from .tmle import EstimationError, run_estimator

DEFAULT_SEED = 8675309

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "simulate"            # estimate | simulate | diagnostics
    scenario: str = "all"             # 'all' or 'n=...,prev=...,extrap=...'
    methods: str = ",".join(METHOD_ORDER)
    n_reps: int = 1000
    seed: int = DEFAULT_SEED
    k_sl: int = 10
    k_outer: int = 5
    library: str = "default"          # estimate mode only
    workers: int = 1
    out: str = "results"
    input: str | None = None          # estimate mode CSV
    dump_replicate: int | None = None  # diagnostics mode


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cvtmle",
        description="TMLE / CVTMLE[Q] estimation and the Monte Carlo study harness.",
    )
    ap.add_argument("--mode", choices=["estimate", "simulate", "diagnostics"])
    ap.add_argument("--config", help="flat JSON config file; flags override its values")
    ap.add_argument("--scenario", help="'all' or 'n=200,prev=80,extrap=high'")
    ap.add_argument("--methods", help=f"comma list from {','.join(METHOD_ORDER)}")
    ap.add_argument("--n-reps", type=int, dest="n_reps")
    ap.add_argument("--seed", type=int, help="master seed (all randomness flows from it)")
    ap.add_argument("--k-sl", type=int, dest="k_sl", help="Super Learner folds")
    ap.add_argument("--k-outer", type=int, dest="k_outer", help="CVTMLE[Q] outer folds")
    ap.add_argument("--library", choices=["default", "rf"], help="estimate-mode library")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", help="output directory for simulate/diagnostics")
    ap.add_argument("--input", help="estimate-mode input CSV with a,y + covariates")
    ap.add_argument("--dump-replicate", type=int, dest="dump_replicate",
                    help="diagnostics mode: dump this replicate's dataset as CSV")
    return ap


def parse_config(argv) -> RunConfig:
    """Defaults < config file < explicit CLI flags; unknown keys rejected."""
    ns = _build_parser().parse_args(argv)
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    if ns.config is not None:
        try:
            with open(ns.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {ns.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a flat JSON object")
        for key, val in file_cfg.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, val)
    for name in known:
        val = getattr(ns, name, None)
        if val is not None:
            setattr(cfg, name, val)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.mode not in ("estimate", "simulate", "diagnostics"):
        raise ConfigError(f"invalid mode {cfg.mode!r}")
    for m in _method_list(cfg):
        if m not in METHOD_DEFS:
            raise ConfigError(f"unknown method {m!r}; valid: {', '.join(METHOD_ORDER)}")
    if cfg.n_reps < 1:
        raise ConfigError("n-reps must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.k_sl < 2:
        raise ConfigError("k-sl must be >= 2")
    if cfg.k_outer < 2:
        raise ConfigError("k-outer must be >= 2")
    if cfg.library not in ("default", "rf"):
        raise ConfigError(f"invalid library {cfg.library!r}")
    _scenario_list(cfg)  # raises on malformed selector


def _method_list(cfg: RunConfig) -> list[str]:
    return [m.strip() for m in cfg.methods.split(",") if m.strip()]


def _scenario_list(cfg: RunConfig) -> list[ScenarioConfig]:
    if cfg.scenario == "all":
        return list(SCENARIO_GRID)
    kv = {}
    for part in cfg.scenario.split(","):
        if "=" not in part:
            raise ConfigError(f"malformed scenario selector {cfg.scenario!r}")
        key, val = part.split("=", 1)
        kv[key.strip()] = val.strip()
    if set(kv) != {"n", "prev", "extrap"}:
        raise ConfigError("scenario selector needs exactly n=, prev=, extrap=")
    try:
        n = int(kv["n"])
    except ValueError:
        raise ConfigError(f"invalid n {kv['n']!r}") from None
    if n < 1:
        raise ConfigError("scenario n must be >= 1")
    if kv["prev"] not in ("50", "80"):
        raise ConfigError(f"prevalence must be 50 or 80, got {kv['prev']!r}")
    if kv["extrap"] not in ("none", "high"):
        raise ConfigError(f"extrap must be none or high, got {kv['extrap']!r}")
    prev = "fifty" if kv["prev"] == "50" else "eighty"
    return [ScenarioConfig(n_obs=n, prevalence=prev, extrapolation=kv["extrap"])]


def _read_estimation_csv(path: str):
    """Input CSV: binary columns a and y plus covariate columns (any names)."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError("input CSV is empty")
            header = [h.strip() for h in header]
            if "a" not in header or "y" not in header:
                raise DataError("input CSV must have 'a' and 'y' columns")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataError(f"row {lineno}: expected {len(header)} cells, got {len(row)}")
                try:
                    rows.append([float(c) for c in row])
                except ValueError:
                    raise DataError(f"row {lineno}: non-numeric value") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise DataError("input CSV needs at least 2 data rows")
    data = np.asarray(rows)
    a_idx, y_idx = header.index("a"), header.index("y")
    cov_idx = [j for j in range(len(header)) if j not in (a_idx, y_idx)]
    if not cov_idx:
        raise DataError("input CSV has no covariate columns")
    A, Y = data[:, a_idx], data[:, y_idx]
    for name, col in (("a", A), ("y", Y)):
        bad = np.flatnonzero(~((col == 0.0) | (col == 1.0)))
        if bad.size:
            raise DataError(f"row {bad[0] + 2}: column '{name}' must be binary 0/1")
    return data[:, cov_idx], A, Y, [header[j] for j in cov_idx]


def _estimate_mode(cfg: RunConfig) -> int:
    if cfg.input is None:
        raise ConfigError("estimate mode requires --input CSV")
    methods = _method_list(cfg)
    if len(methods) != 1:
        raise ConfigError("estimate mode takes exactly one method")
    token = methods[0]
    variant, preset = METHOD_DEFS[token]
    if token in ("tmle", "cvtmle_q") and cfg.library != "default":
        preset = cfg.library
    W, A, Y, cov_names = _read_estimation_csv(cfg.input)
    ds = Dataset(W=W, A=A.astype(np.int64), Y=Y.astype(np.int64),
                 true_ate=math.nan, true_ps=np.full(len(A), math.nan))
    rng = derive_substream(cfg.seed, 0, ESTIMATOR_ROLE[token])
    result = run_estimator(ds, method=variant, library=preset,
                           k_sl=cfg.k_sl, k_outer=cfg.k_outer, rng=rng)
    payload = result.to_json_dict()
    payload["master_seed"] = cfg.seed
    payload["library"] = preset
    payload["covariates"] = cov_names
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def _prepare_out_dir(out: str) -> None:
    try:
        os.makedirs(out, exist_ok=True)
        probe = os.path.join(out, ".write_probe")
        with open(probe, "w", encoding="utf-8"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"output directory {out!r} is not writable: {exc}") from exc


def _simulate_mode(cfg: RunConfig) -> int:
    _prepare_out_dir(cfg.out)
    scenarios = _scenario_list(cfg)
    methods = _method_list(cfg)

    def progress(done: int, total: int) -> None:
        print(f"progress: {done}/{total} repetitions", file=sys.stderr, flush=True)

    results = run_grid(scenarios, methods, cfg.n_reps, cfg.seed,
                       workers=cfg.workers, k_sl=cfg.k_sl, k_outer=cfg.k_outer,
                       progress=progress)
    metrics = compute_metrics(results)
    config_dict = {
        "mode": cfg.mode, "scenario": cfg.scenario, "methods": cfg.methods,
        "n_reps": cfg.n_reps, "k_sl": cfg.k_sl, "k_outer": cfg.k_outer,
    }
    write_rep_csv(results, os.path.join(cfg.out, "results.csv"), cfg.seed)
    write_summary_json(metrics, os.path.join(cfg.out, "summary.json"), cfg.seed, config_dict)
    write_figure_csv(metrics, os.path.join(cfg.out, "figure_data.csv"), cfg.seed)
    n_failed = sum(r.failed for r in results)
    print(f"wrote {len(results)} repetitions ({n_failed} failed) to {cfg.out}", file=sys.stderr)
    return EXIT_OK


def _diagnostics_mode(cfg: RunConfig) -> int:
    _prepare_out_dir(cfg.out)
    scenarios = _scenario_list(cfg)
    tables = [ps_diagnostics(s, cfg.n_reps, cfg.seed) for s in scenarios]
    payload = {"master_seed": cfg.seed, "n_reps": cfg.n_reps, "scenarios": tables}
    path = os.path.join(cfg.out, "ps_diagnostics.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for table in tables:
        print(f"{table['scenario']}:")
        for group in ("1", "0"):
            g = table["groups"][group]
            print(
                f"  A={group}: PS min/mean/max = {g['ps_min']:.3f}/{g['ps_mean']:.3f}/"
                f"{g['ps_max']:.3f}; count>{0.975} mean = {g['count_above_cutoff_mean']:.1f} "
                f"range = ({g['count_above_cutoff_min']}, {g['count_above_cutoff_max']})"
            )
    if cfg.dump_replicate is not None:
        for scenario in scenarios:
            ds = simulate_dataset(scenario, derive_substream(cfg.seed, cfg.dump_replicate, 0))
            dump = os.path.join(cfg.out, f"replicate_{scenario.scenario_id}_{cfg.dump_replicate}.csv")
            dataset_to_csv(ds, dump)
            print(f"dumped replicate {cfg.dump_replicate} of {scenario.scenario_id} to {dump}",
                  file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if cfg.mode == "estimate":
            return _estimate_mode(cfg)
        if cfg.mode == "simulate":
            return _simulate_mode(cfg)
        return _diagnostics_mode(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EstimationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # unexpected runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
