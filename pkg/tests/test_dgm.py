import math

import numpy as np
import pytest
from scipy.special import expit

from cvtmle import dgm, rng
from cvtmle.simulation import ps_diagnostics

SEED = 20240801

# scenario truths, frozen from a one-off oracle (Gauss-Hermite quadrature over
# the covariate law, cross-checked against a 1e7-draw Monte Carlo)
THETA_NO_EXTRAPOLATION = 0.1253721480
THETA_HIGH_EXTRAPOLATION = 0.1509015099


def test_covariate_marginals():
    W = dgm.generate_covariates(100_000, rng.RngState(seed=SEED))
    target = {0: 0.1, 1: 0.4, 3: 0.7, 4: 0.5, 6: 0.3, 7: 0.8}
    for j, p in target.items():
        assert abs(W[:, j].mean() - p) < 0.005
        assert set(np.unique(W[:, j])) <= {0.0, 1.0}
    for j in (2, 5):
        assert abs(W[:, j].mean()) < 0.013
        assert abs(W[:, j].var() - 1.0) < 0.02


def test_covariates_deterministic():
    a = dgm.generate_covariates(500, rng.RngState(seed=1))
    b = dgm.generate_covariates(500, rng.RngState(seed=1))
    assert np.array_equal(a, b)


def test_covariates_reject_bad_n():
    with pytest.raises(ValueError):
        dgm.generate_covariates(0, rng.RngState(seed=1))


@pytest.mark.parametrize(
    "prevalence,w,expected",
    [
        ("fifty", np.zeros(8), expit(-0.45)),
        ("eighty", np.zeros(8), expit(1.05)),
        ("fifty", np.eye(8)[0], expit(-0.45 + math.log(5))),
    ],
)
def test_exposure_probability_closed_form(prevalence, w, expected):
    cfg = dgm.ScenarioConfig(n_obs=10, prevalence=prevalence)
    assert dgm.exposure_probability(w, cfg)[0] == pytest.approx(expected, abs=1e-12)


def test_outcome_probability_closed_form():
    cfg0 = dgm.ScenarioConfig(n_obs=10, extrapolation="none")
    cfg2 = dgm.ScenarioConfig(n_obs=10, extrapolation="high")
    z = np.zeros(8)
    assert dgm.outcome_probability(z, 0, cfg0)[0] == pytest.approx(expit(-0.8), abs=1e-12)
    assert dgm.outcome_probability(z, 1, cfg0)[0] == pytest.approx(
        expit(-0.8 + math.log(1.75)), abs=1e-12)
    w1 = np.eye(8)[0]
    assert dgm.outcome_probability(w1, 1, cfg2)[0] == pytest.approx(
        expit(-0.8 + math.log(1.75) + math.log(1.5) + 2.0), abs=1e-12)


def test_outcome_probability_rejects_nonbinary_a():
    cfg = dgm.ScenarioConfig(n_obs=10)
    with pytest.raises(ValueError):
        dgm.outcome_probability(np.zeros(8), 0.5, cfg)


def test_simulate_dataset_shapes_and_ranges():
    cfg = dgm.ScenarioConfig(n_obs=300, prevalence="eighty", extrapolation="high")
    ds = dgm.simulate_dataset(cfg, rng.derive_substream(SEED, 0, dgm.DATA_ROLE))
    assert ds.W.shape == (300, 8)
    assert set(np.unique(ds.A)) <= {0, 1}
    assert set(np.unique(ds.Y)) <= {0, 1}
    assert -1.0 <= ds.true_ate <= 1.0
    assert np.all((ds.true_ps > 0) & (ds.true_ps < 1))


def test_true_ate_is_function_of_w_only():
    cfg = dgm.ScenarioConfig(n_obs=400, prevalence="eighty", extrapolation="high")
    ds = dgm.simulate_dataset(cfg, rng.derive_substream(SEED, 1, dgm.DATA_ROLE))
    direct = np.mean(dgm.outcome_probability(ds.W, 1, cfg) - dgm.outcome_probability(ds.W, 0, cfg))
    assert ds.true_ate == pytest.approx(direct, abs=1e-15)


def test_theta_identical_across_prevalence_arms():
    # theta_i has no exposure-coefficient dependence and the covariate stream
    # is shared per replicate, so the scenario truths agree exactly
    a = dgm.true_ate_scenario(dgm.ScenarioConfig(500, "fifty", "high"), 20, SEED)
    b = dgm.true_ate_scenario(dgm.ScenarioConfig(500, "eighty", "high"), 20, SEED)
    assert a == b


def test_extrapolation_raises_theta():
    a = dgm.true_ate_scenario(dgm.ScenarioConfig(500, "fifty", "none"), 20, SEED)
    b = dgm.true_ate_scenario(dgm.ScenarioConfig(500, "fifty", "high"), 20, SEED)
    assert b > a


@pytest.mark.parametrize(
    "extrapolation,expected",
    [("none", THETA_NO_EXTRAPOLATION), ("high", THETA_HIGH_EXTRAPOLATION)],
)
def test_theta_matches_oracle(extrapolation, expected):
    cfg = dgm.ScenarioConfig(n_obs=1000, prevalence="fifty", extrapolation=extrapolation)
    theta = dgm.true_ate_scenario(cfg, 500, SEED)
    assert theta == pytest.approx(expected, abs=1.5e-3)


def test_outcome_probability_fan():
    # with the interaction on, the treated contrast across W1 exceeds the
    # untreated contrast (non-parallel outcome probabilities)
    cfg = dgm.ScenarioConfig(n_obs=10, extrapolation="high")
    w0, w1 = np.zeros(8), np.eye(8)[0]
    treated_gap = dgm.outcome_probability(w1, 1, cfg)[0] - dgm.outcome_probability(w0, 1, cfg)[0]
    control_gap = dgm.outcome_probability(w1, 0, cfg)[0] - dgm.outcome_probability(w0, 0, cfg)[0]
    assert treated_gap > control_gap


def test_ps_calibration_n1000_eighty():
    cfg = dgm.ScenarioConfig(n_obs=1000, prevalence="eighty")
    diag = ps_diagnostics(cfg, 200, SEED)
    treated = diag["groups"]["1"]
    control = diag["groups"]["0"]
    assert treated["ps_mean"] == pytest.approx(0.813, abs=0.02)
    assert control["ps_mean"] == pytest.approx(0.753, abs=0.02)
    assert treated["count_above_cutoff_mean"] == pytest.approx(10.8, rel=0.30)


def test_ps_calibration_fifty_has_no_cutoff_exceedances():
    cfg = dgm.ScenarioConfig(n_obs=200, prevalence="fifty")
    diag = ps_diagnostics(cfg, 200, SEED)
    assert diag["groups"]["1"]["count_above_cutoff_mean"] == 0.0
    assert diag["groups"]["1"]["ps_mean"] == pytest.approx(0.554, abs=0.02)
    assert diag["groups"]["0"]["ps_mean"] == pytest.approx(0.452, abs=0.02)


def test_scenario_id_roundtrip():
    for cfg in dgm.SCENARIO_GRID:
        assert dgm.scenario_by_id(cfg.scenario_id) == cfg
    assert dgm.scenario_by_id("n500_prev80_exthigh").n_obs == 500
    with pytest.raises(KeyError):
        dgm.scenario_by_id("nonsense")


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        dgm.ScenarioConfig(n_obs=0)
    with pytest.raises(ValueError):
        dgm.ScenarioConfig(n_obs=100, prevalence="sixty")
    with pytest.raises(ValueError):
        dgm.ScenarioConfig(n_obs=100, extrapolation="medium")


def test_dataset_csv_dump(tmp_path):
    cfg = dgm.ScenarioConfig(n_obs=25)
    ds = dgm.simulate_dataset(cfg, rng.derive_substream(SEED, 0, dgm.DATA_ROLE))
    path = tmp_path / "rep.csv"
    dgm.dataset_to_csv(ds, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "w1,w2,w3,w4,w5,w6,w7,w8,a,y"
    assert len(lines) == 26
    back = np.array([[float(c) for c in row.split(",")] for row in lines[1:]])
    assert np.array_equal(back[:, :8], ds.W)
    assert np.array_equal(back[:, 8], ds.A)
    assert np.array_equal(back[:, 9], ds.Y)
