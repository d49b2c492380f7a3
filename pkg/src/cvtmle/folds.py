"""Stratified K-fold assignment used by the Super Learner and CV-TMLE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngState, permutation


@dataclass(frozen=True)
class FoldAssignment:
    n_folds: int
    fold_of: np.ndarray  # fold index per subject

    def validation_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def training_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


def make_folds(n: int, n_folds: int, strata, rng: RngState) -> FoldAssignment:
    """Stratified permutation split into folds of near-equal size.

    Within each stratum level subjects are shuffled and dealt round-robin;
    the dealing cursor carries across strata, so overall fold sizes differ
    by at most one while each stratum stays balanced across folds.
    """
    if not 2 <= n_folds <= n:
        raise ValueError(f"need 2 <= n_folds <= n, got K={n_folds}, n={n}")
    strata = np.zeros(n) if strata is None else np.asarray(strata)
    if strata.shape != (n,):
        raise ValueError("strata must have length n")
    fold_of = np.empty(n, dtype=np.int64)
    cursor = 0
    for level in np.unique(strata):
        members = np.flatnonzero(strata == level)
        shuffled = members[permutation(rng, members.size)]
        for i in shuffled:
            fold_of[i] = cursor % n_folds
            cursor += 1
    return FoldAssignment(n_folds=n_folds, fold_of=fold_of)
