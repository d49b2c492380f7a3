"""Monte Carlo engine and metrics: scenario grid x method grid x replicates.

Each (replicate, role) pair owns a derived substream, so a fixed master seed
yields byte-identical outputs for any worker count and execution order. The
dataset stream depends only on the replicate index: all four methods see the
identical dataset (paired design), which removes between-method Monte Carlo
noise from the contrasts.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .dgm import DATA_ROLE, ScenarioConfig, scenario_by_id, simulate_dataset
from .rng import derive_substream
from .tmle import run_estimator

# method token -> (estimator variant, library preset); order is canonical
METHOD_DEFS = {
    "tmle": ("tmle", "default"),
    "cvtmle_q": ("cvtmle_q", "default"),
    "tmle_rf": ("tmle", "rf"),
    "cvtmle_q_rf": ("cvtmle_q", "rf"),
}
METHOD_ORDER = tuple(METHOD_DEFS)

# substream roles: 0 is the dataset stream (see dgm), methods get 1..4
ESTIMATOR_ROLE = {name: i + 1 for i, name in enumerate(METHOD_ORDER)}

REP_CSV_HEADER = "scenario,method,rep,theta_i,ate_hat,var_hat,ci_low,ci_high,failed,reason"

PS_TRUNCATION_CUTOFF = 0.975


@dataclass(frozen=True)
class RepResult:
    scenario: str
    method: str
    rep: int
    theta_i: float
    ate_hat: float
    var_hat: float
    ci_low: float
    ci_high: float
    failed: bool
    reason: str = ""


@dataclass(frozen=True)
class MetricsSummary:
    scenario: str
    method: str
    n_reps: int           # attempted
    n_effective: int      # non-failed, used in every metric
    theta: float
    coverage: float
    coverage_band: tuple[float, float]
    rel_bias: float       # percent
    rel_error: float      # percent
    empse: float
    modse: float


def mc_coverage_band(p: float, n_reps: int) -> tuple[float, float]:
    """Nominal Monte Carlo band for a coverage estimate: p +/- 1.96*sqrt(p(1-p)/n)."""
    half = 1.96 * math.sqrt(p * (1.0 - p) / n_reps)
    return (p - half, p + half)


def run_repetition(scenario: ScenarioConfig, method: str, rep: int, master_seed: int,
                   k_sl: int = 10, k_outer: int = 5) -> RepResult:
    """Simulate one dataset and run one estimator; failures are captured,
    never propagated, so a sweep always completes."""
    if method not in METHOD_DEFS:
        raise ValueError(f"unknown method {method!r}")
    ds = simulate_dataset(scenario, derive_substream(master_seed, rep, DATA_ROLE))
    est_rng = derive_substream(master_seed, rep, ESTIMATOR_ROLE[method])
    variant, preset = METHOD_DEFS[method]
    try:
        res = run_estimator(ds, method=variant, library=preset,
                            k_sl=k_sl, k_outer=k_outer, rng=est_rng)
        return RepResult(
            scenario=scenario.scenario_id, method=method, rep=rep,
            theta_i=ds.true_ate, ate_hat=res.ate, var_hat=res.se ** 2,
            ci_low=res.ci[0], ci_high=res.ci[1], failed=False,
        )
    except Exception as exc:
        return RepResult(
            scenario=scenario.scenario_id, method=method, rep=rep,
            theta_i=ds.true_ate, ate_hat=math.nan, var_hat=math.nan,
            ci_low=math.nan, ci_high=math.nan, failed=True,
            reason=f"{type(exc).__name__}: {exc}",
        )


def _run_task(args) -> RepResult:
    scenario_id, method, rep, master_seed, k_sl, k_outer = args
    return run_repetition(scenario_by_id(scenario_id), method, rep, master_seed, k_sl, k_outer)


def run_grid(scenarios, methods, n_reps: int, master_seed: int, workers: int = 1,
             k_sl: int = 10, k_outer: int = 5, progress=None) -> list[RepResult]:
    """All scenarios x methods x replicates, in canonical output order
    regardless of worker count."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    scenarios = list(scenarios)
    methods = list(methods)
    for m in methods:
        if m not in METHOD_DEFS:
            raise ValueError(f"unknown method {m!r}")
    tasks = [
        (cfg.scenario_id, method, rep, master_seed, k_sl, k_outer)
        for cfg in scenarios
        for method in methods
        for rep in range(n_reps)
    ]
    if workers <= 1:
        results = []
        for i, task in enumerate(tasks):
            results.append(_run_task(task))
            if progress is not None and (i + 1) % max(1, len(tasks) // 20) == 0:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = []
            chunk = max(1, len(tasks) // (workers * 8))
            for i, res in enumerate(pool.map(_run_task, tasks, chunksize=chunk)):
                results.append(res)
                if progress is not None and (i + 1) % max(1, len(tasks) // 20) == 0:
                    progress(i + 1, len(tasks))
    scen_order = {cfg.scenario_id: i for i, cfg in enumerate(scenarios)}
    meth_order = {m: i for i, m in enumerate(METHOD_ORDER)}
    results.sort(key=lambda r: (scen_order[r.scenario], meth_order[r.method], r.rep))
    return results


def run_scenario(scenario: ScenarioConfig, methods, n_reps: int, master_seed: int,
                 workers: int = 1, k_sl: int = 10, k_outer: int = 5) -> list[RepResult]:
    return run_grid([scenario], methods, n_reps, master_seed, workers, k_sl, k_outer)


def compute_metrics(results) -> dict[tuple[str, str], MetricsSummary]:
    """Per scenario x method: coverage, relative bias/error, EmpSE, ModSE.

    Failed replicates are excluded; n_effective reports how many remain.
    The scenario truth theta is the mean of the replicate-specific theta_i
    over the cell's non-failed replicates. Metrics are invariant to row
    order."""
    cells: dict[tuple[str, str], list[RepResult]] = {}
    for r in results:
        cells.setdefault((r.scenario, r.method), []).append(r)
    out: dict[tuple[str, str], MetricsSummary] = {}
    for key in sorted(cells):
        rows = sorted(cells[key], key=lambda r: r.rep)
        ok = [r for r in rows if not r.failed]
        n_eff = len(ok)
        if n_eff < 2:
            out[key] = MetricsSummary(
                scenario=key[0], method=key[1], n_reps=len(rows), n_effective=n_eff,
                theta=math.nan, coverage=math.nan, coverage_band=(math.nan, math.nan),
                rel_bias=math.nan, rel_error=math.nan, empse=math.nan, modse=math.nan,
            )
            continue
        theta_i = np.array([r.theta_i for r in ok])
        ate = np.array([r.ate_hat for r in ok])
        var = np.array([r.var_hat for r in ok])
        lo = np.array([r.ci_low for r in ok])
        hi = np.array([r.ci_high for r in ok])
        theta = float(np.mean(theta_i))
        coverage = float(np.mean((lo <= theta) & (theta <= hi)))
        empse = float(np.std(ate, ddof=1))
        modse = float(np.sqrt(np.mean(var)))
        rel_error = 100.0 * (modse / empse - 1.0)
        rel_bias = 100.0 * float(np.mean(ate - theta_i)) / theta
        out[key] = MetricsSummary(
            scenario=key[0], method=key[1], n_reps=len(rows), n_effective=n_eff,
            theta=theta, coverage=coverage, coverage_band=mc_coverage_band(0.95, n_eff),
            rel_bias=rel_bias, rel_error=rel_error, empse=empse, modse=modse,
        )
    return out


def ps_diagnostics(scenario: ScenarioConfig, n_reps: int, master_seed: int) -> dict:
    """Generating propensity-score summaries by exposure group: pooled
    min/mean/max and the per-replicate count above the 0.975 cut-off."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    stats = {
        a: {"min": math.inf, "max": -math.inf, "sum": 0.0, "n": 0, "counts": []}
        for a in (0, 1)
    }
    for rep in range(n_reps):
        ds = simulate_dataset(scenario, derive_substream(master_seed, rep, DATA_ROLE))
        for a in (0, 1):
            ps = ds.true_ps[ds.A == a]
            if ps.size:
                s = stats[a]
                s["min"] = min(s["min"], float(ps.min()))
                s["max"] = max(s["max"], float(ps.max()))
                s["sum"] += float(ps.sum())
                s["n"] += ps.size
            stats[a]["counts"].append(int(np.sum(ps > PS_TRUNCATION_CUTOFF)))
    out = {"scenario": scenario.scenario_id, "n_reps": n_reps, "groups": {}}
    for a in (0, 1):
        s = stats[a]
        counts = np.array(s["counts"])
        out["groups"][str(a)] = {
            "ps_min": s["min"],
            "ps_mean": s["sum"] / s["n"] if s["n"] else math.nan,
            "ps_max": s["max"],
            "count_above_cutoff_mean": float(counts.mean()),
            "count_above_cutoff_min": int(counts.min()),
            "count_above_cutoff_max": int(counts.max()),
        }
    return out


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_rep_csv(results, path, master_seed: int) -> None:
    """Per-replicate results; header records the master seed."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# master_seed={master_seed}\n")
        fh.write(REP_CSV_HEADER + "\n")
        for r in results:
            fh.write(
                f"{r.scenario},{r.method},{r.rep},{_fmt(r.theta_i)},{_fmt(r.ate_hat)},"
                f"{_fmt(r.var_hat)},{_fmt(r.ci_low)},{_fmt(r.ci_high)},"
                f"{int(r.failed)},{r.reason}\n"
            )


def write_summary_json(metrics, path, master_seed: int, config: dict | None = None) -> None:
    """Summary keyed 'scenario/method' with every MetricsSummary field."""
    cells = {}
    for (scenario, method), m in sorted(metrics.items()):
        d = asdict(m)
        d["coverage_band"] = list(m.coverage_band)
        cells[f"{scenario}/{method}"] = d
    payload = {"master_seed": master_seed, "cells": cells}
    if config is not None:
        payload["config"] = config
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


_FIGURE_METRICS = ("coverage", "coverage_band_low", "coverage_band_high",
                   "rel_bias", "rel_error", "empse", "modse", "theta", "n_effective")


def write_figure_csv(metrics, path, master_seed: int) -> None:
    """Tidy long-format table sufficient to redraw the coverage / relative
    bias / relative error panels with any plotting tool."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# master_seed={master_seed}\n")
        fh.write("scenario,n_obs,prevalence,extrapolation,method,metric,value\n")
        for (scenario, method), m in sorted(metrics.items()):
            cfg = scenario_by_id(scenario)
            prev = "50" if cfg.prevalence == "fifty" else "80"
            for name in _FIGURE_METRICS:
                if name == "coverage_band_low":
                    val = m.coverage_band[0]
                elif name == "coverage_band_high":
                    val = m.coverage_band[1]
                else:
                    val = getattr(m, name)
                fh.write(
                    f"{scenario},{cfg.n_obs},{prev},{cfg.extrapolation},"
                    f"{method},{name},{_fmt(val)}\n"
                )
