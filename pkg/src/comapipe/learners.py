"""Ridge classifier with closed-form leave-one-out alpha selection, and a
random forest of Gini CART trees with impurity-based importances.

Poor outcome is the positive class throughout: ridge targets are +1 for
Poor and -1 for Good, forest leaves store the fraction of Poor samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .errors import ContractError, TrainingError
from .ingest import poor_mask

ALPHA_GRID = np.logspace(-3, 3, 10)


# ---------------------------------------------------------------- ridge


@dataclass(frozen=True, eq=False)
class RidgeModel:
    weights: np.ndarray  # over kept features, standardized units
    intercept: float
    alpha_chosen: float
    alpha_grid: np.ndarray
    mean: np.ndarray  # over kept features
    scale: np.ndarray
    kept: np.ndarray  # bool mask over the input features
    loocv_errors: np.ndarray

    @property
    def n_features_in(self) -> int:
        return int(self.kept.size)

    @property
    def dropped(self) -> np.ndarray:
        return np.flatnonzero(~self.kept)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
            "alpha_chosen": self.alpha_chosen,
            "alpha_grid": self.alpha_grid.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "kept": self.kept.astype(int).tolist(),
            "loocv_errors": self.loocv_errors.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RidgeModel":
        return cls(
            weights=np.asarray(d["weights"], dtype=float),
            intercept=float(d["intercept"]),
            alpha_chosen=float(d["alpha_chosen"]),
            alpha_grid=np.asarray(d["alpha_grid"], dtype=float),
            mean=np.asarray(d["mean"], dtype=float),
            scale=np.asarray(d["scale"], dtype=float),
            kept=np.asarray(d["kept"], dtype=bool),
            loocv_errors=np.asarray(d["loocv_errors"], dtype=float),
        )


def ridge_targets(y) -> np.ndarray:
    return np.where(poor_mask(y), 1.0, -1.0)


def standardize(X: np.ndarray):
    """Column means/SDs; columns with (numerically) zero variance are dropped."""
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    kept = sd > 1e-12 * np.maximum(np.abs(mean), 1.0)
    return kept, mean[kept], sd[kept]


def loocv_residuals(Xs: np.ndarray, t: np.ndarray, alphas) -> np.ndarray:
    """Leave-one-out residuals for every alpha, shape [n_alphas, n].

    ``Xs`` must be column-centred; the intercept is unpenalized. Uses the
    hat-matrix identity e_i = (t_i - f_i) / (1 - h_ii) with the hat matrix
    diagonal taken from a thin SVD, so no refits are needed.
    """
    n = Xs.shape[0]
    U, s, _ = np.linalg.svd(Xs, full_matrices=False)
    tc = t - t.mean()
    proj = U.T @ tc
    U2 = U * U
    out = np.empty((len(alphas), n))
    for a, alpha in enumerate(alphas):
        shrink = s * s / (s * s + alpha)
        fitted = t.mean() + U @ (shrink * proj)
        h = 1.0 / n + U2 @ shrink
        out[a] = (t - fitted) / (1.0 - h)
    return out


def ridge_fit(X, y, alphas=ALPHA_GRID) -> RidgeModel:
    X = np.asarray(X, dtype=float)
    t = ridge_targets(y)
    n = X.shape[0]
    if X.ndim != 2 or n != t.size:
        raise ContractError(f"X shape {X.shape} does not match {t.size} labels")
    if n < 3:
        raise TrainingError(f"ridge needs at least 3 samples, got {n}")
    if np.all(t == t[0]):
        raise TrainingError("ridge needs both outcome classes")
    kept, mean, scale = standardize(X)
    if not kept.any():
        raise TrainingError("no features with non-zero variance")
    Xs = (X[:, kept] - mean) / scale
    alphas = np.asarray(alphas, dtype=float)
    resid = loocv_residuals(Xs, t, alphas)
    errors = (resid ** 2).mean(axis=1)
    best = int(np.argmin(errors))  # first minimum -> smallest alpha on ascending grid
    alpha = float(alphas[best])
    U, s, Vt = np.linalg.svd(Xs, full_matrices=False)
    w = Vt.T @ (s / (s * s + alpha) * (U.T @ (t - t.mean())))
    return RidgeModel(w, float(t.mean()), alpha, alphas, mean, scale, kept, errors)


def ridge_decision_many(model: RidgeModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features_in:
        raise ContractError(
            f"expected {model.n_features_in} features, got {X.shape[1]}"
        )
    return ((X[:, model.kept] - model.mean) / model.scale) @ model.weights + model.intercept


def ridge_decision(model: RidgeModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ContractError("ridge_decision takes a single feature vector")
    return float(ridge_decision_many(model, x[None, :])[0])


# ---------------------------------------------------------------- forest


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 300
    mtry: Optional[int] = None  # None -> floor(sqrt(p))
    seed: int = 0
    min_leaf: int = 1
    bootstrap: bool = True


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf.

    A sample goes left when ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # fraction of Poor samples reaching the node

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.asarray(d["feature"], dtype=np.int64),
                   np.asarray(d["threshold"], dtype=float),
                   np.asarray(d["left"], dtype=np.int64),
                   np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=float))


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: list
    config: ForestConfig
    n_features: int
    mtry: int
    feature_importances: np.ndarray
    oob_proba: Optional[np.ndarray] = field(default=None)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def seed(self) -> int:
        return self.config.seed

    def to_dict(self) -> dict:
        return {
            "config": vars(self.config),
            "n_features": self.n_features,
            "mtry": self.mtry,
            "feature_importances": self.feature_importances.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            config=ForestConfig(**d["config"]),
            n_features=int(d["n_features"]),
            mtry=int(d["mtry"]),
            feature_importances=np.asarray(d["feature_importances"], dtype=float),
        )


@njit(cache=True)
def _best_split(X, y, idx, candidates, mtry, min_leaf):
    """Search features in ``candidates`` order until ``mtry`` non-constant
    ones were evaluated. Returns (feature, threshold, weighted child Gini)."""
    m = idx.shape[0]
    best_f = -1
    best_thr = 0.0
    best_imp = np.inf
    visited = 0
    xs = np.empty(m)
    ys = np.empty(m)
    for f in candidates:
        if visited >= mtry:
            break
        for i in range(m):
            xs[i] = X[idx[i], f]
        if xs.min() == xs.max():
            continue
        visited += 1
        order = np.argsort(xs)
        total_pos = 0.0
        for i in range(m):
            ys[i] = y[idx[order[i]]]
            total_pos += ys[i]
        left_pos = 0.0
        for i in range(1, m):
            left_pos += ys[i - 1]
            if i < min_leaf or m - i < min_leaf:
                continue
            lo = xs[order[i - 1]]
            if lo == xs[order[i]]:
                continue
            pl = left_pos / i
            pr = (total_pos - left_pos) / (m - i)
            imp = (i * 2.0 * pl * (1.0 - pl) + (m - i) * 2.0 * pr * (1.0 - pr)) / m
            if imp < best_imp:
                best_imp = imp
                best_f = f
                best_thr = lo
    return best_f, best_thr, best_imp


def _grow_tree(X, y, rows, mtry, min_leaf, rng, importances):
    """Grow one CART tree on ``rows`` (bootstrap indices, may repeat)."""
    n_root = rows.size
    p = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    stack = [(new_node(rows), rows)]
    while stack:
        node, idx = stack.pop()
        m = idx.size
        pos = value[node]
        if m < 2 * min_leaf or pos == 0.0 or pos == 1.0:
            continue
        candidates = rng.permutation(p)
        f, thr, child_imp = _best_split(X, y, idx, candidates, mtry, min_leaf)
        if f < 0:
            continue
        parent_imp = 2.0 * pos * (1.0 - pos)
        importances[f] += (m / n_root) * (parent_imp - child_imp)
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = int(f), float(thr)
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri))
        stack.append((left[node], li))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value))


def forest_fit(X, y, config: ForestConfig = ForestConfig()) -> ForestModel:
    X = np.ascontiguousarray(X, dtype=float)
    yb = poor_mask(y).astype(float)
    n, p = X.shape
    if n != yb.size:
        raise ContractError(f"X has {n} rows but {yb.size} labels")
    if n < 5:
        raise TrainingError(f"forest needs at least 5 samples, got {n}")
    if yb.min() == yb.max():
        raise TrainingError("forest needs both outcome classes")
    if p == 0:
        raise TrainingError("forest needs at least one feature")
    mtry = config.mtry or max(1, int(np.floor(np.sqrt(p))))
    mtry = min(mtry, p)
    rng = np.random.Generator(np.random.Philox(int(config.seed)))
    importances = np.zeros(p)
    trees = []
    oob_sum = np.zeros(n)
    oob_cnt = np.zeros(n)
    for _ in range(config.n_trees):
        rows = rng.integers(0, n, n) if config.bootstrap else np.arange(n)
        tree = _grow_tree(X, yb, rows, mtry, config.min_leaf, rng, importances)
        trees.append(tree)
        if config.bootstrap:
            oob = np.ones(n, dtype=bool)
            oob[rows] = False
            if oob.any():
                oob_sum[oob] += tree.predict(X[oob])
                oob_cnt[oob] += 1
    total = importances.sum()
    importances = importances / total if total > 0 else np.full(p, 1.0 / p)
    oob_proba = np.where(oob_cnt > 0, oob_sum / np.maximum(oob_cnt, 1), np.nan)
    return ForestModel(trees, config, p, mtry, importances,
                       oob_proba if config.bootstrap else None)


def forest_predict_proba_many(model: ForestModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features:
        raise ContractError(f"expected {model.n_features} features, got {X.shape[1]}")
    acc = np.zeros(X.shape[0])
    for tree in model.trees:
        acc += tree.predict(X)
    return acc / len(model.trees)


def forest_predict_proba(model: ForestModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ContractError("forest_predict_proba takes a single feature vector")
    return float(forest_predict_proba_many(model, x[None, :])[0])
