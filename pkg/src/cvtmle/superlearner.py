"""V-fold cross-validated stacking over a configurable learner library.

The meta-learner minimises the mean binomial negative log-likelihood of the
stacked out-of-fold prediction matrix over the probability simplex, so the
ensemble is itself a probability and its CV risk can never exceed the best
single learner's. Folds are stratified on the regression target to keep
single-class training folds from occurring at small n.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import learners as _learners
from . import rng as _rng
from . import trees as _trees
from .folds import FoldAssignment, make_folds
from .rng import RngState

__all__ = [
    "DEFAULT_LIBRARY",
    "EXTENDED_LIBRARY",
    "FoldAssignment",
    "LearnerSpec",
    "SLModel",
    "cv_risk_matrix",
    "fit_superlearner",
    "get_library",
    "make_folds",
    "solve_meta_weights",
]

PRED_CLAMP = 1e-6  # keeps log-loss finite against exact 0/1 forest leaves

META_TOL = 1e-10
META_MAX_ITER = 20000


@dataclass(frozen=True)
class LearnerSpec:
    """Descriptor of one candidate learner."""

    name: str
    kind: str            # 'stepwise' | 'glm' | 'lasso' | 'forest' | 'gam' | 'mean'
    design: str | None = None   # glm only
    forest_params: _trees.ForestParams | None = None  # forest only


DEFAULT_LIBRARY = (
    LearnerSpec("stepwise", "stepwise"),
    LearnerSpec("glm_main", "glm", _learners.MAIN_TERMS),
    LearnerSpec("glm_interact", "glm", _learners.POLY_INTERACTIONS),
)

# the 'RF' library: default plus lasso, random forest, and spline GAM
EXTENDED_LIBRARY = DEFAULT_LIBRARY + (
    LearnerSpec("lasso", "lasso"),
    LearnerSpec("random_forest", "forest"),
    LearnerSpec("gam", "gam"),
)

_PRESETS = {"default": DEFAULT_LIBRARY, "rf": EXTENDED_LIBRARY}


def get_library(preset) -> tuple[LearnerSpec, ...]:
    """Resolve a preset token ('default' | 'rf') or pass through a library."""
    if isinstance(preset, str):
        try:
            return _PRESETS[preset]
        except KeyError:
            raise ValueError(f"unknown library preset {preset!r}") from None
    lib = tuple(preset)
    if not lib:
        raise ValueError("learner library must be nonempty")
    names = [spec.name for spec in lib]
    if len(set(names)) != len(names):
        raise ValueError("learner names must be unique")
    return lib


class _FittedMean:
    def __init__(self, value: float):
        self.value = value

    def predict(self, X) -> np.ndarray:
        return np.full(np.atleast_2d(X).shape[0], self.value)


class _FittedGlmLearner:
    def __init__(self, fit: _learners.GlmFit):
        self.fit = fit

    def predict(self, X) -> np.ndarray:
        return _learners.predict_glm(self.fit, X)


class _FittedForestLearner:
    def __init__(self, forest: _trees.Forest):
        self.forest = forest

    def predict(self, X) -> np.ndarray:
        return _trees.predict_forest(self.forest, X)


def fit_learner(spec: LearnerSpec, X, y, continuous, rng: RngState):
    """Fit one library member; returns an object with .predict(X) -> probs."""
    if spec.kind == "mean":
        return _FittedMean(float(np.mean(y)))
    if spec.kind == "stepwise":
        return _FittedGlmLearner(_learners.fit_stepwise(X, y))
    if spec.kind == "glm":
        return _FittedGlmLearner(_learners.fit_glm(X, y, spec.design, continuous))
    if spec.kind == "gam":
        return _FittedGlmLearner(_learners.fit_gam(X, y, continuous))
    if spec.kind == "lasso":
        fit = _learners.fit_lasso(X, y, rng, continuous=continuous)
        return _FittedGlmLearner(fit)
    if spec.kind == "forest":
        params = spec.forest_params if spec.forest_params is not None else _trees.ForestParams()
        return _FittedForestLearner(_trees.fit_random_forest(X, y, params, rng))
    raise ValueError(f"unknown learner kind {spec.kind!r}")


def cv_risk_matrix(library, X, y, folds: FoldAssignment, rng: RngState, continuous=None):
    """Out-of-fold prediction matrix Z (n x L).

    Z[i, l] is learner l's prediction for subject i, trained on the training
    set of i's fold — subject i's outcome never reaches its own row. A
    learner failing on a fold contributes that fold's training-set mean and
    is recorded in the returned flags.
    """
    library = get_library(library)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if continuous is None:
        continuous = _learners.detect_continuous(X)
    n = y.shape[0]
    Z = np.empty((n, len(library)))
    flags: list[tuple[int, str, str]] = []
    for k in range(folds.n_folds):
        tr = folds.training_indices(k)
        va = folds.validation_indices(k)
        for l, spec in enumerate(library):
            sub_rng = _rng.spawn(rng)
            try:
                fitted = fit_learner(spec, X[tr], y[tr], continuous, sub_rng)
                Z[va, l] = fitted.predict(X[va])
            except Exception as exc:  # failed learner: honest constant fallback
                Z[va, l] = float(np.mean(y[tr]))
                flags.append((k, spec.name, f"{type(exc).__name__}: {exc}"))
    return Z, flags


def _mean_nll(Z: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    p = Z @ w
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


# probe flag: 'nll' (binomial likelihood stacking) or 'nnls' (least squares)
META_OBJECTIVE = "nll"


def _nnls_weights(Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    import scipy.optimize

    coef, _ = scipy.optimize.nnls(Z, y)
    total = coef.sum()
    if total <= 0.0:
        return np.full(Z.shape[1], 1.0 / Z.shape[1])
    return coef / total


def solve_meta_weights(Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Simplex weights minimising the mean binomial negative log-likelihood
    of Z @ w, by exponentiated-gradient descent with backtracking.

    Entries of Z are clamped to [1e-6, 1-1e-6] first. The solution is
    guaranteed no worse than the best single column (vertices are feasible
    and used both as a warm restart and as a final safeguard).
    """
    Z = np.clip(np.asarray(Z, dtype=np.float64), PRED_CLAMP, 1.0 - PRED_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    n, L = Z.shape
    if L == 1:
        return np.ones(1)
    if META_OBJECTIVE == "nnls":
        return _nnls_weights(Z, y)

    def run_eg(w0: np.ndarray) -> tuple[np.ndarray, float]:
        log_w = np.log(np.clip(w0, 1e-300, None))
        log_w -= np.max(log_w)
        w = np.exp(log_w)
        w /= w.sum()
        f = _mean_nll(Z, y, w)
        step = 1.0
        for _ in range(META_MAX_ITER):
            p = Z @ w
            grad = Z.T @ ((p - y) / (p * (1.0 - p))) / n
            improved = False
            while step > 1e-14:
                trial_log = log_w - step * grad
                trial_log -= np.max(trial_log)
                trial = np.exp(trial_log)
                trial /= trial.sum()
                f_trial = _mean_nll(Z, y, trial)
                if f_trial <= f:
                    improved = f - f_trial > 0.0
                    log_w, w, gain, f = trial_log, trial, f - f_trial, f_trial
                    step *= 1.5
                    break
                step *= 0.5
            if not improved or gain < META_TOL:
                break
        return w, f

    w_best, f_best = run_eg(np.full(L, 1.0 / L))

    vertex_nll = np.array([_mean_nll(Z, y, np.eye(L)[l]) for l in range(L)])
    v = int(np.argmin(vertex_nll))
    if vertex_nll[v] < f_best:
        w_v, f_v = run_eg(0.99 * np.eye(L)[v] + 0.01 / L)
        if f_v < f_best:
            w_best, f_best = w_v, f_v
        if vertex_nll[v] < f_best:  # vertex itself is the best feasible point seen
            w_best = np.eye(L)[v]
    w_best = np.clip(w_best, 0.0, None)
    return w_best / w_best.sum()


@dataclass
class SLModel:
    """Fitted Super Learner: full-data learner fits plus convex meta-weights."""

    library: tuple[LearnerSpec, ...]
    weights: np.ndarray
    cv_risk: np.ndarray              # per-learner CV mean negative log-likelihood
    meta_risk: float                 # achieved CV risk of the weighted ensemble
    folds: FoldAssignment
    fits: list = field(repr=False, default_factory=list)
    cv_flags: list = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.zeros(X.shape[0])
        for w, fitted in zip(self.weights, self.fits):
            if w > 0.0:
                out += w * fitted.predict(X)
        return np.clip(out, PRED_CLAMP, 1.0 - PRED_CLAMP)

    def weight_by_name(self) -> dict[str, float]:
        return {spec.name: float(w) for spec, w in zip(self.library, self.weights)}


def fit_superlearner(library, X, y, n_folds: int, rng: RngState, continuous=None) -> SLModel:
    """Cross-validate the library, solve the meta-weights, refit on full data.

    Folds are stratified on y. Learner failures inside cross-validation fall
    back per `cv_risk_matrix`; failures on the full-data refit propagate.
    """
    library = get_library(library)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n < n_folds:
        raise ValueError(f"need n >= n_folds, got n={n}, K={n_folds}")
    if continuous is None:
        continuous = _learners.detect_continuous(X)

    folds = make_folds(n, n_folds, strata=y, rng=rng)
    Z, flags = cv_risk_matrix(library, X, y, folds, rng, continuous)
    weights = solve_meta_weights(Z, y)
    Zc = np.clip(Z, PRED_CLAMP, 1.0 - PRED_CLAMP)
    cv_risk = np.array([
        -np.mean(y * np.log(Zc[:, l]) + (1.0 - y) * np.log(1.0 - Zc[:, l]))
        for l in range(len(library))
    ])
    fits = [fit_learner(spec, X, y, continuous, _rng.spawn(rng)) for spec in library]
    return SLModel(library=library, weights=weights, cv_risk=cv_risk,
                   meta_risk=_mean_nll(Zc, y, weights), folds=folds, fits=fits,
                   cv_flags=flags)
