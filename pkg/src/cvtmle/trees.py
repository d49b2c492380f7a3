"""Classification trees and a random-forest probability learner.

Trees are grown by greedy Gini splits. At each node an mtry-sized feature
subset is sampled without replacement; candidate thresholds are midpoints
between consecutive distinct sorted values; ties break to the lowest feature
index, then the lowest threshold. Leaves hold the class-1 proportion of
their training rows, so forest predictions are probabilities (the mean of
terminal-leaf proportions over trees), as the targeting step requires.

Growth runs inside one compiled kernel that replicates the package's
SplitMix64 stream arithmetic exactly, consuming one uniform per sampled
candidate feature; `build_tree` reconstructs the node objects from the
kernel's flat arrays, so the object API and the fast path cannot diverge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import rng as _rng
from .rng import RngState


@dataclass(frozen=True)
class ForestParams:
    # min_leaf=1 grows trees fully, the classification-forest convention; the
    # resulting near-interpolation of training rows is what makes the forest
    # the library's aggressive, variance-starving candidate
    n_trees: int = 100
    mtry: int | None = None      # default: ceil(sqrt(p)) at fit time
    min_leaf: int = 1
    max_depth: int | None = None
    bootstrap: bool = True

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")

    def resolved_mtry(self, n_features: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(math.sqrt(n_features))
        return min(m, n_features)


@dataclass
class TreeNode:
    value: float                     # class-1 proportion of training rows
    n_rows: int
    feature: int | None = None       # None for a leaf
    threshold: float = 0.0
    left: "TreeNode | None" = None   # rows with x[feature] <= threshold
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


# SplitMix64 constants, mirrored from rng.py; uint64 ops wrap mod 2**64
_U_GAMMA = np.uint64(_rng.GOLDEN_GAMMA)
_U_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_U_MIX_B = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _k_uniform(seed: np.uint64, counter: np.uint64) -> tuple[np.float64, np.uint64]:
    counter += np.uint64(1)
    z = seed + counter * _U_GAMMA
    z = (z ^ (z >> np.uint64(30))) * _U_MIX_A
    z = (z ^ (z >> np.uint64(27))) * _U_MIX_B
    z = z ^ (z >> np.uint64(31))
    return np.float64(z >> np.uint64(11)) * 2.0**-53, counter


@njit(cache=True)
def _grow_kernel(X, y, min_leaf, max_depth, mtry, seed, counter):
    """Grow one tree over flat arrays with an explicit preorder stack.

    Returns (feature, threshold, left, right, value, n_rows, n_nodes,
    counter). feature < 0 marks a leaf. Node 0 is the root; children carry
    larger ids (preorder), matching recursive construction.
    """
    n, p = X.shape
    max_nodes = 2 * n + 1
    feature = np.full(max_nodes, -1, np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    value = np.zeros(max_nodes)
    n_rows = np.zeros(max_nodes, np.int64)

    idx = np.arange(n)
    scratch = np.empty(n, np.int64)
    feats = np.empty(p, np.int64)

    # stack rows: (start, end, depth, parent, side); side 0=left, 1=right
    stack = np.empty((max_nodes, 5), np.int64)
    top = 0
    stack[top, 0] = 0
    stack[top, 1] = n
    stack[top, 2] = 0
    stack[top, 3] = -1
    stack[top, 4] = 0
    top += 1
    n_nodes = 0

    while top > 0:
        top -= 1
        start, end, depth, parent, side = (
            stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3], stack[top, 4])
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if side == 0:
                left[parent] = node
            else:
                right[parent] = node

        size = end - start
        total = 0.0
        for i in range(start, end):
            total += y[idx[i]]
        value[node] = total / size
        n_rows[node] = size

        if size < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth) \
                or total == 0.0 or total == size:
            continue

        # mtry candidate features: partial Fisher-Yates, one uniform each
        for j in range(p):
            feats[j] = j
        for i in range(mtry):
            u, counter = _k_uniform(seed, counter)
            j = i + int(u * (p - i))
            feats[i], feats[j] = feats[j], feats[i]
        cand = np.sort(feats[:mtry])

        # best Gini split; strict improvement while scanning features in
        # ascending order and thresholds ascending realises the tie-break
        best_imp = np.inf
        best_feat = -1
        best_thr = 0.0
        seg = idx[start:end]
        for ci in range(mtry):
            f = cand[ci]
            col = np.empty(size)
            for i in range(size):
                col[i] = X[seg[i], f]
            order = np.argsort(col)
            ones = 0.0
            for i in range(size - 1):
                ones += y[seg[order[i]]]
                n_left = i + 1
                n_right = size - n_left
                if n_left < min_leaf:
                    continue
                if n_right < min_leaf:
                    break
                lo = col[order[i]]
                hi = col[order[i + 1]]
                if lo == hi:
                    continue
                imp = (ones * (n_left - ones) / n_left
                       + (total - ones) * (n_right - (total - ones)) / n_right)
                if imp < best_imp:
                    best_imp = imp
                    best_feat = f
                    best_thr = 0.5 * (lo + hi)
        if best_feat < 0:
            continue

        feature[node] = best_feat
        threshold[node] = best_thr
        # stable partition of the segment: left rows keep relative order
        n_go_left = 0
        n_go_right = 0
        for i in range(start, end):
            if X[idx[i], best_feat] <= best_thr:
                idx[start + n_go_left] = idx[i]
                n_go_left += 1
            else:
                scratch[n_go_right] = idx[i]
                n_go_right += 1
        for i in range(n_go_right):
            idx[start + n_go_left + i] = scratch[i]

        # preorder: push right first so the left child pops next
        stack[top, 0] = start + n_go_left
        stack[top, 1] = end
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 1
        top += 1
        stack[top, 0] = start
        stack[top, 1] = start + n_go_left
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 0
        top += 1

    return feature, threshold, left, right, value, n_rows, n_nodes, counter


@dataclass
class FlatTree:
    """Array form of one grown tree (feature < 0 marks a leaf)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_rows: np.ndarray


def _grow(X, y, params: ForestParams, rng: RngState) -> FlatTree:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    if y.size < 1:
        raise ValueError("need at least 1 row")
    max_depth = -1 if params.max_depth is None else params.max_depth
    mtry = params.resolved_mtry(X.shape[1])
    feature, threshold, left, right, value, n_rows, n_nodes, counter = _grow_kernel(
        X, y, params.min_leaf, max_depth, mtry,
        np.uint64(rng.seed), np.uint64(rng.counter),
    )
    rng.counter = int(counter)
    sl = slice(0, n_nodes)
    return FlatTree(feature[sl].copy(), threshold[sl].copy(), left[sl].copy(),
                    right[sl].copy(), value[sl].copy(), n_rows[sl].copy())


def _to_nodes(flat: FlatTree, i: int = 0) -> TreeNode:
    if flat.feature[i] < 0:
        return TreeNode(value=float(flat.value[i]), n_rows=int(flat.n_rows[i]))
    return TreeNode(
        value=float(flat.value[i]),
        n_rows=int(flat.n_rows[i]),
        feature=int(flat.feature[i]),
        threshold=float(flat.threshold[i]),
        left=_to_nodes(flat, int(flat.left[i])),
        right=_to_nodes(flat, int(flat.right[i])),
    )


def build_tree(X, y, params: ForestParams, rng: RngState) -> TreeNode:
    """Grow one tree by greedy Gini splits."""
    return _to_nodes(_grow(X, y, params, rng))


# tree vote aggregation: each tree contributes its leaf's majority class and
# the forest averages the votes (classification-forest convention); the
# probe flag below switches to leaf-proportion averaging
VOTE_AGGREGATION = True


def predict_tree(node: TreeNode, X: np.ndarray, vote: bool | None = None) -> np.ndarray:
    vote = VOTE_AGGREGATION if vote is None else vote
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(X.shape[0])
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if nd.is_leaf:
            out[idx] = (1.0 if nd.value > 0.5 else 0.0) if vote else nd.value
            continue
        mask = X[idx, nd.feature] <= nd.threshold
        stack.append((nd.left, idx[mask]))
        stack.append((nd.right, idx[~mask]))
    return out


@njit(cache=True)
def _predict_kernel(feature, threshold, left, right, value, offsets, X, vote):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for t in range(n_trees):
        base = offsets[t]
        for i in range(n):
            node = base
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            if vote:
                out[i] += 1.0 if value[node] > 0.5 else 0.0
            else:
                out[i] += value[node]
    return out / n_trees


@dataclass
class Forest:
    n_features: int
    params: ForestParams
    _flats: list = field(repr=False, default_factory=list)
    _flat: dict = field(repr=False, default_factory=dict)

    @property
    def trees(self) -> list:
        """TreeNode roots, one per tree (materialised on demand)."""
        return [_to_nodes(f) for f in self._flats]


def fit_random_forest(X, y, params: ForestParams, rng: RngState) -> Forest:
    """Fit n_trees trees, each on a bootstrap resample (when enabled) with
    its own spawned substream."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    flats = []
    for _ in range(params.n_trees):
        tree_rng = _rng.spawn(rng)
        if params.bootstrap:
            idx = _rng.bootstrap_indices(tree_rng, X.shape[0])
            flats.append(_grow(X[idx], y[idx], params, tree_rng))
        else:
            flats.append(_grow(X, y, params, tree_rng))
    flat = {
        "feature": np.concatenate([f.feature for f in flats]),
        "threshold": np.concatenate([f.threshold for f in flats]),
        "left": np.concatenate([f.left for f in flats]),
        "right": np.concatenate([f.right for f in flats]),
        "value": np.concatenate([f.value for f in flats]),
        "offsets": np.cumsum([0] + [f.feature.size for f in flats]).astype(np.int64),
    }
    return Forest(n_features=X.shape[1], params=params, _flats=flats, _flat=flat)


def predict_forest(forest: Forest, X: np.ndarray, vote: bool | None = None) -> np.ndarray:
    """Forest probability: mean over trees of each tree's contribution
    (majority vote under vote aggregation, leaf proportion otherwise)."""
    vote = VOTE_AGGREGATION if vote is None else vote
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != forest.n_features:
        raise ValueError(f"expected {forest.n_features} features, got {X.shape[1]}")
    f = forest._flat
    return _predict_kernel(f["feature"], f["threshold"], f["left"], f["right"],
                           f["value"], f["offsets"], np.ascontiguousarray(X), vote)
