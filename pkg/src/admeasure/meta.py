"""Explaining estimator error from experiment characteristics.

A bagged CART regression forest with out-of-bag evaluation, permutation
importance measured as the drop in out-of-bag R^2, and partial dependence
curves. Columns are handled in sorted-name order internally, so a fitted
forest does not depend on the order in which characteristics are supplied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    mtry: int = 2
    min_node: int = 1
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.mtry < 1 or self.min_node < 1:
            raise ValueError("n_trees, mtry and min_node must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")


class _Tree:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        rows = np.arange(X.shape[0])
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]


def _best_split(x: np.ndarray, y: np.ndarray, min_node: int):
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = xs.size
    csum = np.cumsum(ys)
    total = csum[-1]
    n_left = np.arange(1, n)
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_node) & (n - n_left >= min_node)
    if not valid.any():
        return None
    left_sum = csum[:-1]
    gain = left_sum**2 / n_left + (total - left_sum) ** 2 / (n - n_left)
    gain = np.where(valid, gain, -np.inf)
    i = int(np.argmax(gain))
    return gain[i], 0.5 * (xs[i] + xs[i + 1])


def _grow(X: np.ndarray, y: np.ndarray, rng: np.random.Generator, p: ForestParams) -> _Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(value) - 1

    root = new_node(np.arange(y.size))
    stack = [(root, np.arange(y.size), 0)]
    n_features = X.shape[1]
    mtry = min(p.mtry, n_features)
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        if idx.size < 2 * p.min_node or (p.max_depth is not None and depth >= p.max_depth) or np.ptp(yn) == 0:
            continue
        base = yn.sum() ** 2 / yn.size
        best = None
        for f in rng.choice(n_features, size=mtry, replace=False):
            found = _best_split(X[idx, f], yn, p.min_node)
            if found is not None and found[0] > base + 1e-12 and (best is None or found[0] > best[0]):
                best = (found[0], found[1], int(f))
        if best is None:
            continue
        _, thr, f = best
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node], right[node] = new_node(li), new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return _Tree(feature, threshold, left, right, value)


def r2(y: np.ndarray, pred: np.ndarray) -> float:
    sst = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum((y - pred) ** 2) / sst)


class Forest:
    def __init__(self, names, trees, inbag, params, X, y):
        self.feature_names = tuple(names)
        self._canon = np.argsort(np.asarray(self.feature_names, dtype=object), kind="stable")
        self.trees = trees
        self.inbag = inbag  # (n_trees, n) bootstrap counts
        self.params = params
        self.X_train = X
        self.y_train = y

    def _canonical(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(f"expected {len(self.feature_names)} columns")
        return X[:, self._canon]

    def predict(self, X) -> np.ndarray:
        Xc = self._canonical(X)
        return np.mean([t.predict(Xc) for t in self.trees], axis=0)

    def oob_predict(self, X=None) -> tuple[np.ndarray, np.ndarray]:
        """Out-of-bag predictions for the training rows (optionally with modified features).

        Returns the predictions and a mask of rows that were out of bag at least once.
        """
        Xc = self._canonical(self.X_train if X is None else X)
        total = np.zeros(Xc.shape[0])
        count = np.zeros(Xc.shape[0])
        for t, bag in zip(self.trees, self.inbag):
            oob = bag == 0
            if oob.any():
                total[oob] += t.predict(Xc[oob])
                count[oob] += 1
        mask = count > 0
        pred = np.where(mask, total / np.maximum(count, 1), np.nan)
        return pred, mask

    def oob_r2(self, X=None) -> float:
        pred, mask = self.oob_predict(X)
        return r2(self.y_train[mask], pred[mask])


def fit_forest(X, y, params: ForestParams = ForestParams(), feature_names: Sequence[str] | None = None) -> Forest:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be (n, p) with one target per row")
    if y.size < 20:
        raise ValueError(f"need at least 20 records, got {y.size}")
    if not np.isfinite(y).all():
        raise ValueError("targets must be finite (drop undefined APEs first)")
    if np.ptp(y) == 0:
        raise ValueError("constant target: nothing to explain")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{j}" for j in range(X.shape[1]))
    if len(names) != X.shape[1] or len(set(names)) != len(names):
        raise ValueError("feature_names must be unique and match the columns")
    forest = Forest(names, [], None, params, X, y)
    Xc = forest._canonical(X)
    rng = np.random.default_rng(params.seed)
    n = y.size
    inbag = np.zeros((params.n_trees, n), dtype=np.int64)
    for t in range(params.n_trees):
        boot = rng.integers(0, n, size=n)
        inbag[t] = np.bincount(boot, minlength=n)
        forest.trees.append(_grow(Xc[boot], y[boot], rng, params))
    forest.inbag = inbag
    return forest


@dataclass(frozen=True)
class ImportanceReport:
    feature_names: tuple[str, ...]
    base_r2: float
    raw_drop: tuple[float, ...]
    scaled: tuple[float, ...]

    def to_dict(self) -> dict:
        order = np.argsort(-np.asarray(self.scaled), kind="stable")
        return {
            "base_oob_r2": self.base_r2,
            "features": [
                {"name": self.feature_names[i], "raw_r2_drop": self.raw_drop[i], "scaled": self.scaled[i]}
                for i in order
            ],
        }


def scale_importance(raw: Sequence[float]) -> list[float]:
    raw = np.asarray(raw, dtype=float)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return [0.0] * raw.size
    return ((raw - lo) / (hi - lo) * 100.0).tolist()


def permutation_importance(forest: Forest, X=None, y=None, seed: int = 0, n_repeats: int = 5) -> ImportanceReport:
    """Drop in out-of-bag R^2 when each column is permuted, scaled to 0-100."""
    if X is not None and not np.array_equal(np.asarray(X, dtype=float), forest.X_train):
        raise ValueError("out-of-bag importance must be evaluated on the training rows")
    if y is not None and not np.array_equal(np.asarray(y, dtype=float), forest.y_train):
        raise ValueError("y does not match the training targets")
    X = forest.X_train
    rng = np.random.default_rng(seed)
    base = forest.oob_r2()
    drops = []
    for j in range(X.shape[1]):
        scores = []
        for _ in range(n_repeats):
            Xp = X.copy()
            Xp[:, j] = X[rng.permutation(X.shape[0]), j]
            scores.append(forest.oob_r2(Xp))
        drops.append(base - float(np.mean(scores)))
    return ImportanceReport(forest.feature_names, base, tuple(drops), tuple(scale_importance(drops)))


@dataclass(frozen=True)
class PartialDependence:
    feature: str
    grid: tuple[float, ...]
    mean_prediction: tuple[float, ...]
    rug_deciles: tuple[float, ...]

    def to_csv(self) -> str:
        lines = ["value,mean_prediction"]
        lines += [f"{v!r},{p!r}" for v, p in zip(self.grid, self.mean_prediction)]
        return "\n".join(lines) + "\n"


def default_grid(x: np.ndarray, n_points: int = 20) -> np.ndarray:
    lo, hi = np.percentile(x, [2, 98])
    return np.linspace(lo, hi, n_points)


def partial_dependence(forest: Forest, X, feature: str, grid=None) -> PartialDependence:
    """Average forest prediction with ``feature`` forced to each grid value."""
    X = np.asarray(X, dtype=float)
    try:
        j = forest.feature_names.index(feature)
    except ValueError:
        raise KeyError(f"unknown feature {feature!r}") from None
    x = X[:, j]
    grid = default_grid(x) if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    if grid.min() < x.min() - 1e-12 or grid.max() > x.max() + 1e-12:
        raise ValueError("grid extends outside the observed feature range")
    means = []
    for v in grid:
        Xv = X.copy()
        Xv[:, j] = v
        means.append(float(forest.predict(Xv).mean()))
    rug = np.percentile(x, np.arange(10, 100, 10))
    return PartialDependence(feature, tuple(float(g) for g in grid), tuple(means), tuple(float(r) for r in rug))
