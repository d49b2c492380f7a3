"""Data-generating mechanism for the simulation study.

Eight covariates: W1, W2, W4, W5, W7, W8 are Bernoulli with success
probabilities 0.1, 0.4, 0.7, 0.5, 0.3, 0.8; W3 and W6 are standard normal.

Exposure:  logit P(A=1|W) = a0 + log(5) W1 + log(1.5) W2 - log(1.5) W4
                               + log(1.5) W6 + log(1.5) W7 + log(1.5) W8
with a0 = -0.45 (50% prevalence) or 1.05 (80% prevalence). The strong
positive W1 coefficient on a 10%-prevalence covariate is what pushes
propensity scores toward 1 in the 80% arm. Note the W4 coefficient is
log(1/1.5): this is the calibration that reproduces the reference
propensity-score summaries (mean PS by exposure group and counts above the
0.975 truncation cut-off).

Outcome:   logit P(Y=1|A,W) = -0.8 + log(1.75) A
                               + log(1.5)(W1+W2+W3+W4+W5+W6) + b7 A*W1
with b7 = 0 (no extrapolation issue) or 2 (high extrapolation issue: a
treatment-by-rare-covariate interaction forcing prediction in a sparsely
observed region).

Draw order is fixed (W columns left to right, then A, then Y, each vector
drawn subject-by-subject off one stream) so replicates are bit-reproducible.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import rng as _rng
from .rng import RngState, derive_substream

# substream role for dataset generation; estimator roles live in simulation.py
DATA_ROLE = 0

# Bernoulli success probabilities by 0-based column; W3 (index 2) and W6
# (index 5) are the standard-normal columns.
BERNOULLI_PROBS = {0: 0.1, 1: 0.4, 3: 0.7, 4: 0.5, 6: 0.3, 7: 0.8}
CONTINUOUS_COLS = (2, 5)
N_COVARIATES = 8

PREVALENCE_ALPHA0 = {"fifty": -0.45, "eighty": 1.05}
EXTRAPOLATION_BETA7 = {"none": 0.0, "high": 2.0}

_LOG5 = math.log(5.0)
_LOG15 = math.log(1.5)

# exposure coefficients by 0-based covariate column (W3 and W5 excluded)
EXPOSURE_COEFS = {0: _LOG5, 1: _LOG15, 3: -_LOG15, 5: _LOG15, 6: _LOG15, 7: _LOG15}

OUTCOME_INTERCEPT = -0.8
OUTCOME_TREATMENT_COEF = math.log(1.75)
# outcome coefficients by 0-based covariate column (W7 and W8 excluded)
OUTCOME_COEFS = {0: _LOG15, 1: _LOG15, 2: _LOG15, 3: _LOG15, 4: _LOG15, 5: _LOG15}


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the simulation grid."""

    n_obs: int
    prevalence: str = "fifty"       # 'fifty' | 'eighty'
    extrapolation: str = "none"     # 'none' | 'high'

    def __post_init__(self) -> None:
        if self.n_obs < 1:
            raise ValueError("n_obs must be >= 1")
        if self.prevalence not in PREVALENCE_ALPHA0:
            raise ValueError(f"prevalence must be one of {sorted(PREVALENCE_ALPHA0)}")
        if self.extrapolation not in EXTRAPOLATION_BETA7:
            raise ValueError(f"extrapolation must be one of {sorted(EXTRAPOLATION_BETA7)}")

    @property
    def alpha0(self) -> float:
        return PREVALENCE_ALPHA0[self.prevalence]

    @property
    def beta7(self) -> float:
        return EXTRAPOLATION_BETA7[self.extrapolation]

    @property
    def scenario_id(self) -> str:
        prev = "50" if self.prevalence == "fifty" else "80"
        return f"n{self.n_obs}_prev{prev}_ext{self.extrapolation}"


# the full 2 x 2 x 2 grid in canonical order
SCENARIO_GRID = tuple(
    ScenarioConfig(n_obs=n, prevalence=p, extrapolation=e)
    for n in (200, 1000)
    for p in ("fifty", "eighty")
    for e in ("none", "high")
)


def scenario_by_id(scenario_id: str) -> ScenarioConfig:
    m = re.fullmatch(r"n(\d+)_prev(50|80)_ext(none|high)", scenario_id)
    if m is None:
        raise KeyError(f"unknown scenario id {scenario_id!r}")
    return ScenarioConfig(
        n_obs=int(m.group(1)),
        prevalence="fifty" if m.group(2) == "50" else "eighty",
        extrapolation=m.group(3),
    )


@dataclass
class Dataset:
    """One simulated replicate: covariates, exposure, outcome, and truth."""

    W: np.ndarray            # (n, 8)
    A: np.ndarray            # (n,) in {0,1}
    Y: np.ndarray            # (n,) in {0,1}
    true_ate: float          # replicate-specific risk difference theta_i
    true_ps: np.ndarray = field(repr=False)  # generating P(A=1|W), diagnostics only

    @property
    def n_obs(self) -> int:
        return self.W.shape[0]


def generate_covariates(n: int, rng: RngState) -> np.ndarray:
    """Draw the (n, 8) covariate matrix, columns left to right."""
    if n < 1:
        raise ValueError("n must be >= 1")
    W = np.empty((n, N_COVARIATES))
    for j in range(N_COVARIATES):
        if j in BERNOULLI_PROBS:
            W[:, j] = _rng.bernoullis(rng, BERNOULLI_PROBS[j], n)
        else:
            W[:, j] = _rng.gaussians(rng, n)
    return W


def exposure_probability(W: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Generating propensity score P(A=1|W) for each row of W."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    lp = np.full(W.shape[0], cfg.alpha0)
    for j, coef in EXPOSURE_COEFS.items():
        lp += coef * W[:, j]
    return expit(lp)


def outcome_probability(W: np.ndarray, a, cfg: ScenarioConfig) -> np.ndarray:
    """Generating outcome probability P(Y=1|A=a, W) for each row of W."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    a = np.broadcast_to(np.asarray(a, dtype=np.float64), (W.shape[0],))
    if not np.all((a == 0.0) | (a == 1.0)):
        raise ValueError("a must be binary")
    lp = OUTCOME_INTERCEPT + OUTCOME_TREATMENT_COEF * a
    for j, coef in OUTCOME_COEFS.items():
        lp = lp + coef * W[:, j]
    lp = lp + cfg.beta7 * a * W[:, 0]
    return expit(lp)


def simulate_dataset(cfg: ScenarioConfig, rng: RngState) -> Dataset:
    """Draw one replicate: W, then A|W, then Y|A,W.

    true_ate is the analytic risk difference averaged over the realised
    covariate sample; it never depends on the drawn A or Y.
    """
    W = generate_covariates(cfg.n_obs, rng)
    ps = exposure_probability(W, cfg)
    A = _rng.bernoullis(rng, ps)
    py = outcome_probability(W, A, cfg)
    Y = _rng.bernoullis(rng, py)
    theta_i = float(np.mean(outcome_probability(W, 1, cfg) - outcome_probability(W, 0, cfg)))
    return Dataset(W=W, A=A, Y=Y, true_ate=theta_i, true_ps=ps)


def true_ate_scenario(cfg: ScenarioConfig, n_reps: int, master_seed: int) -> float:
    """Scenario truth: mean of theta_i over the same replicate streams the
    simulation itself uses."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    total = 0.0
    for rep in range(n_reps):
        ds = simulate_dataset(cfg, derive_substream(master_seed, rep, DATA_ROLE))
        total += ds.true_ate
    return total / n_reps


def dataset_to_csv(ds: Dataset, path) -> None:
    """Dump one replicate as CSV with columns w1..w8,a,y (cross-check hook)."""
    header = ",".join([f"w{j + 1}" for j in range(N_COVARIATES)] + ["a", "y"])
    data = np.column_stack([ds.W, ds.A, ds.Y])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in data:
            cells = [repr(float(v)) if j in CONTINUOUS_COLS else str(int(v))
                     for j, v in enumerate(row)]
            fh.write(",".join(cells) + "\n")
