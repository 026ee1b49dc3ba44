"""Pipeline primitives: imputers, a disparate-impact repair step and classifiers.

Every primitive declares a hyperparameter domain. A pipeline is always
``imputer -> intervention -> encoder -> model``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import expit

from pipeforge.data import Frame


class AllNullColumn(ValueError):
    pass


class SchemaMismatch(ValueError):
    pass


# -- hyperparameter domains --------------------------------------------------

@dataclass(frozen=True)
class RealDomain:
    low: float
    high: float
    log: bool = False

    finite = False

    def contains(self, value: Any) -> bool:
        return isinstance(value, (int, float)) and not isinstance(value, bool) and self.low <= value <= self.high

    def from_unit(self, u: float) -> float:
        u = min(max(u, 0.0), 1.0)
        if self.log:
            return float(math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low))))
        return float(self.low + u * (self.high - self.low))

    def to_unit(self, value: float) -> float:
        if self.high == self.low:
            return 0.0
        if self.log:
            return (math.log(value) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))
        return (value - self.low) / (self.high - self.low)

    def describe(self) -> str:
        return f"[{self.low}, {self.high}]"


@dataclass(frozen=True)
class IntDomain:
    low: int
    high: int

    finite = True

    @property
    def size(self) -> int:
        return self.high - self.low + 1

    def contains(self, value: Any) -> bool:
        return isinstance(value, (int, np.integer)) and not isinstance(value, bool) and self.low <= value <= self.high

    def from_unit(self, u: float) -> int:
        return int(min(self.low + math.floor(u * self.size), self.high))

    def to_unit(self, value: int) -> float:
        return (value - self.low + 0.5) / self.size

    def values(self) -> list[int]:
        return list(range(self.low, self.high + 1))

    def describe(self) -> str:
        return f"{{{self.low}..{self.high}}}"


@dataclass(frozen=True)
class CategoricalDomain:
    choices: tuple[str, ...]

    finite = True

    @property
    def size(self) -> int:
        return len(self.choices)

    def contains(self, value: Any) -> bool:
        return value in self.choices

    def from_unit(self, u: float) -> str:
        return self.choices[min(int(math.floor(u * self.size)), self.size - 1)]

    def values(self) -> list[str]:
        return list(self.choices)

    def describe(self) -> str:
        return "{" + ", ".join(self.choices) + "}"


Domain = RealDomain | IntDomain | CategoricalDomain


@dataclass(frozen=True)
class PrimitiveSpec:
    stage: str
    name: str
    domain: dict[str, Domain] = field(default_factory=dict)


REGISTRY: dict[str, PrimitiveSpec] = {}


def register(spec: PrimitiveSpec) -> PrimitiveSpec:
    for dim, dom in spec.domain.items():
        if isinstance(dom, RealDomain) and not dom.low <= dom.high:
            raise ValueError(f"{spec.name}.{dim}: empty interval")
        if isinstance(dom, IntDomain) and dom.size < 1:
            raise ValueError(f"{spec.name}.{dim}: empty range")
        if isinstance(dom, CategoricalDomain) and not dom.choices:
            raise ValueError(f"{spec.name}.{dim}: no choices")
    REGISTRY[spec.name] = spec
    return spec


for _name in ("median-mode", "mean-mode", "constant"):
    register(PrimitiveSpec("imputer", _name))
register(PrimitiveSpec("intervention", "none"))
register(PrimitiveSpec("intervention", "dir_repair", {"repair_level": RealDomain(0.0, 1.0)}))
register(PrimitiveSpec("model", "lr_clf", {
    "l2": RealDomain(1e-4, 10.0, log=True),
    "learning_rate": RealDomain(1e-2, 2.0, log=True),
    "epochs": IntDomain(20, 200),
}))
register(PrimitiveSpec("model", "dt_clf", {
    "max_depth": IntDomain(1, 8),
    "min_samples_leaf": IntDomain(1, 50),
}))
register(PrimitiveSpec("model", "majority_clf"))


# -- imputers ----------------------------------------------------------------

MISSING_CATEGORY = "__missing__"


def _mode(values: np.ndarray) -> str:
    present = [v for v in values if v is not None]
    if not present:
        raise AllNullColumn("no observed category")
    uniq, counts = np.unique(np.array(present, dtype=object).astype(str), return_counts=True)
    # np.unique sorts, so ties resolve to the lexicographically smallest value
    return str(uniq[int(np.argmax(counts))])


def fit_imputer(frame: Frame, name: str, hyperparams: dict | None = None) -> dict[str, Any]:
    if name not in ("median-mode", "mean-mode", "constant"):
        raise ValueError(f"unknown imputer {name!r}")
    fills: dict[str, Any] = {}
    for col, values in frame.columns.items():
        if frame.kinds[col] == "numeric":
            observed = values[~np.isnan(values)]
            if name == "constant":
                fills[col] = 0.0
            elif observed.size == 0:
                raise AllNullColumn(f"column {col!r} has no observed values")
            elif name == "median-mode":
                fills[col] = float(np.median(observed))
            else:
                fills[col] = float(np.mean(observed))
        else:
            try:
                fills[col] = MISSING_CATEGORY if name == "constant" else _mode(values)
            except AllNullColumn:
                raise AllNullColumn(f"column {col!r} has no observed values") from None
    return {"name": name, "fills": fills}


def apply_imputer(state: dict[str, Any], frame: Frame) -> Frame:
    out = {}
    for col, values in frame.columns.items():
        fill = state["fills"][col]
        if frame.kinds[col] == "numeric":
            out[col] = np.where(np.isnan(values), fill, values)
        else:
            filled = values.copy()
            filled[np.array([v is None for v in values], dtype=bool)] = fill
            out[col] = filled
    return Frame(out, dict(frame.kinds))


# -- disparate impact repair -------------------------------------------------

def fit_intervention(frame: Frame, groups: np.ndarray, name: str, hyperparams: dict | None = None) -> dict[str, Any]:
    """Fit a quantile repair of numeric features.

    ``groups`` holds one integer group code per row (negative = no group).
    The repair target for quantile ``q`` is the median across groups of each
    group's quantile function at ``q``.
    """
    hyperparams = hyperparams or {}
    if name == "none":
        return {"name": "none"}
    if name != "dir_repair":
        raise ValueError(f"unknown intervention {name!r}")
    level = float(hyperparams.get("repair_level", 1.0))
    if not 0.0 <= level <= 1.0:
        raise ValueError("repair_level must lie in [0, 1]")
    codes = sorted(int(c) for c in np.unique(groups) if c >= 0)
    per_column = {}
    for col, values in frame.columns.items():
        if frame.kinds[col] != "numeric":
            continue
        sorted_by_group = {}
        for c in codes:
            vals = np.sort(values[groups == c])
            if vals.size >= 2:
                sorted_by_group[c] = vals
        if sorted_by_group:
            per_column[col] = sorted_by_group
    return {"name": "dir_repair", "level": level, "columns": per_column}


def _repair_targets(sorted_by_group: dict[int, np.ndarray], q: np.ndarray) -> np.ndarray:
    curves = np.stack([np.quantile(v, q) for v in sorted_by_group.values()])
    return np.median(curves, axis=0)


def apply_intervention(state: dict[str, Any], frame: Frame, groups: np.ndarray) -> Frame:
    if state["name"] == "none" or state["level"] == 0.0:
        return frame
    level = state["level"]
    out = dict(frame.columns)
    for col, sorted_by_group in state["columns"].items():
        values = frame.columns[col]
        repaired = values.astype(float, copy=True)
        for code, ref in sorted_by_group.items():
            rows = groups == code
            if not rows.any():
                continue
            x = values[rows]
            # mid-rank position of each value inside its group's training distribution
            uniq, first, counts = np.unique(ref, return_index=True, return_counts=True)
            if uniq.size == 1:
                q = np.full(x.shape, 0.5)
            else:
                q = np.interp(x, uniq, (first + (counts - 1) / 2.0) / (ref.size - 1))
            target = _repair_targets(sorted_by_group, q)
            repaired[rows] = (1.0 - level) * x + level * target
        out[col] = repaired
    return Frame(out, dict(frame.kinds))


# -- encoding ----------------------------------------------------------------

def fit_encoder(frame: Frame) -> dict[str, Any]:
    spec = []
    for col, values in frame.columns.items():
        if frame.kinds[col] == "numeric":
            mean = float(values.mean()) if values.size else 0.0
            std = float(values.std()) if values.size else 1.0
            spec.append((col, "numeric", (mean, std if std > 0 else 1.0)))
        else:
            spec.append((col, "categorical", tuple(sorted({str(v) for v in values}))))
    return {"columns": spec}


def apply_encoder(state: dict[str, Any], frame: Frame) -> np.ndarray:
    expected = [c for c, _, _ in state["columns"]]
    if list(frame.columns) != expected:
        raise SchemaMismatch(f"expected columns {expected}, got {list(frame.columns)}")
    blocks = []
    for col, kind, info in state["columns"]:
        values = frame.columns[col]
        if kind == "numeric":
            mean, std = info
            blocks.append(((values - mean) / std)[:, None])
        else:
            as_str = np.array([str(v) for v in values], dtype=object)
            blocks.append(np.stack([as_str == cat for cat in info], axis=1).astype(float)
                          if info else np.zeros((len(values), 0)))
    if not blocks:
        return np.zeros((frame.n_rows, 0))
    return np.hstack(blocks)


@dataclass
class Preprocessor:
    imputer: dict[str, Any]
    intervention: dict[str, Any]
    encoder: dict[str, Any]

    def transform(self, frame: Frame, groups: np.ndarray) -> np.ndarray:
        expected = list(self.imputer["fills"])
        if list(frame.columns) != expected:
            raise SchemaMismatch(f"expected columns {expected}, got {list(frame.columns)}")
        completed = apply_imputer(self.imputer, frame)
        repaired = apply_intervention(self.intervention, completed, groups)
        return apply_encoder(self.encoder, repaired)


def fit_preprocessor(frame: Frame, groups: np.ndarray, imputer: str, intervention: str,
                     hyperparams: dict) -> tuple[Preprocessor, np.ndarray]:
    """Fit imputer, intervention and encoder on ``frame``; return the fitted chain and its design matrix."""
    imp = fit_imputer(frame, imputer, hyperparams)
    completed = apply_imputer(imp, frame)
    inter = fit_intervention(completed, groups, intervention, hyperparams)
    repaired = apply_intervention(inter, completed, groups)
    enc = fit_encoder(repaired)
    return Preprocessor(imp, inter, enc), apply_encoder(enc, repaired)


# -- models ------------------------------------------------------------------

@dataclass
class FittedModel:
    name: str
    params: dict[str, Any]
    degenerate: bool = False
    work: float = 0.0

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        kind = self.name if not self.degenerate else "majority_clf"
        if kind == "majority_clf":
            return np.full(X.shape[0], self.params["rate"])
        if kind == "lr_clf":
            return expit(X @ self.params["w"] + self.params["b"])
        return _tree_predict(self.params, X)


def logistic_loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray,
                           l2: float) -> tuple[float, np.ndarray, float]:
    """Mean logistic loss plus ``l2 / 2 * ||w||^2`` and its gradient."""
    z = X @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w))
    r = expit(z) - y
    return loss, X.T @ r / len(y) + l2 * w, float(r.mean())


def _fit_lr(X: np.ndarray, y: np.ndarray, l2: float, learning_rate: float, epochs: int) -> dict[str, Any]:
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    yf = y.astype(float)
    for _ in range(epochs):
        r = expit(X @ w + b) - yf
        w = w - learning_rate * (X.T @ r / n + l2 * w)
        b = b - learning_rate * float(r.mean())
    return {"w": w, "b": b}


_MAX_THRESHOLDS = 32


def _candidate_thresholds(x: np.ndarray) -> np.ndarray:
    uniq = np.unique(x)
    if uniq.size <= _MAX_THRESHOLDS + 1:
        return (uniq[:-1] + uniq[1:]) / 2.0
    cuts = np.quantile(x, np.linspace(0.0, 1.0, _MAX_THRESHOLDS + 2)[1:-1])
    return np.unique(cuts)


def _fit_tree(X: np.ndarray, y: np.ndarray, max_depth: int, min_leaf: int) -> dict[str, Any]:
    """Level-wise CART with Gini impurity over binned candidate thresholds.

    Ties between splits go to the lowest feature index, then the lowest
    threshold.
    """
    n, d = X.shape
    thresholds = np.full((d, _MAX_THRESHOLDS), np.inf)
    bins = np.zeros((n, d), dtype=np.int64)
    for j in range(d):
        t = _candidate_thresholds(X[:, j])
        thresholds[j, : t.size] = t
        bins[:, j] = np.searchsorted(t, X[:, j], side="left")
    M = _MAX_THRESHOLDS + 1
    yf = y.astype(float)

    feature, threshold, left, right, value = [-1], [np.inf], [-1], [-1], [yf.mean() if n else 0.0]
    frontier = [0]
    rows_of = {0: np.arange(n)}
    depth = 0
    offsets = np.arange(d) * M
    while frontier and depth < max_depth and d > 0:
        A = len(frontier)
        local = np.concatenate([np.full(rows_of[node].size, a) for a, node in enumerate(frontier)])
        rows = np.concatenate([rows_of[node] for node in frontier])
        keys = (local[:, None] * (d * M) + offsets[None, :] + bins[rows]).ravel()
        cnt = np.bincount(keys, minlength=A * d * M).reshape(A, d, M)
        pos = np.bincount(keys, weights=np.repeat(yf[rows], d), minlength=A * d * M).reshape(A, d, M)
        c_cnt = np.cumsum(cnt, axis=2)[:, :, :-1]
        c_pos = np.cumsum(pos, axis=2)[:, :, :-1]
        tot = cnt[:, 0, :].sum(axis=1)
        tot_pos = pos[:, 0, :].sum(axis=1)
        n_r = tot[:, None, None] - c_cnt
        p_r = tot_pos[:, None, None] - c_pos
        with np.errstate(divide="ignore", invalid="ignore"):
            g_l = np.where(c_cnt > 0, c_pos * (c_cnt - c_pos) / c_cnt, 0.0)
            g_r = np.where(n_r > 0, p_r * (n_r - p_r) / n_r, 0.0)
            g_parent = np.where(tot > 0, tot_pos * (tot - tot_pos) / np.maximum(tot, 1), 0.0)
        valid = (c_cnt >= min_leaf) & (n_r >= min_leaf) & np.isfinite(thresholds[None, :, :])
        cost = np.where(valid, g_l + g_r, np.inf).reshape(A, -1)
        best = np.argmin(cost, axis=1)
        best_cost = cost[np.arange(A), best]

        next_frontier = []
        next_rows = {}
        for a, node in enumerate(frontier):
            if not np.isfinite(best_cost[a]) or best_cost[a] >= g_parent[a] - 1e-12:
                continue
            j, t_idx = divmod(int(best[a]), M - 1)
            node_rows = rows_of[node]
            go_left = bins[node_rows, j] <= t_idx
            lr = [node_rows[go_left], node_rows[~go_left]]
            feature[node], threshold[node] = j, float(thresholds[j, t_idx])
            for side, child_rows in enumerate(lr):
                child = len(feature)
                feature.append(-1)
                threshold.append(np.inf)
                left.append(-1)
                right.append(-1)
                value.append(float(yf[child_rows].mean()))
                if side == 0:
                    left[node] = child
                else:
                    right[node] = child
                next_frontier.append(child)
                next_rows[child] = child_rows
        frontier, rows_of = next_frontier, next_rows
        depth += 1
    return {
        "feature": np.array(feature), "threshold": np.array(threshold),
        "left": np.array(left), "right": np.array(right), "value": np.array(value), "depth": depth,
    }


def _tree_predict(tree: dict[str, Any], X: np.ndarray) -> np.ndarray:
    node = np.zeros(X.shape[0], dtype=np.int64)
    feature, threshold, left, right = tree["feature"], tree["threshold"], tree["left"], tree["right"]
    for _ in range(tree["depth"] + 1):
        internal = feature[node] >= 0
        if not internal.any():
            break
        idx = np.flatnonzero(internal)
        cur = node[idx]
        go_left = X[idx, feature[cur]] <= threshold[cur]
        node[idx] = np.where(go_left, left[cur], right[cur])
    return tree["value"][node]


def fit_model(X: np.ndarray, y: np.ndarray, name: str, hyperparams: dict, seed: int = 0) -> FittedModel:
    """Fit a classifier. Single-class labels fall back to a majority model with ``degenerate=True``.

    All three models are deterministic given the data, so ``seed`` only
    matters for primitives registered later.
    """
    spec = REGISTRY.get(name)
    if spec is None or spec.stage != "model":
        raise ValueError(f"unknown model {name!r}")
    n, d = X.shape
    rate = float(y.mean()) if n else 0.0
    if n == 0 or rate in (0.0, 1.0):
        return FittedModel(name, {"rate": rate}, degenerate=name != "majority_clf", work=float(n))
    if name == "majority_clf":
        return FittedModel(name, {"rate": rate}, work=float(n))
    if name == "lr_clf":
        epochs = int(hyperparams["epochs"])
        params = _fit_lr(X, y, float(hyperparams["l2"]), float(hyperparams["learning_rate"]), epochs)
        return FittedModel(name, params, work=float(n * max(d, 1) * epochs))
    tree = _fit_tree(X, y, int(hyperparams["max_depth"]), int(hyperparams["min_samples_leaf"]))
    return FittedModel(name, tree, work=float(n * max(d, 1) * max(tree["depth"], 1)))


@dataclass
class FittedPipeline:
    preprocessor: Preprocessor
    model: FittedModel
    threshold: float = 0.5


def fit_pipeline(frame: Frame, y: np.ndarray, groups: np.ndarray, stages: tuple[str, str, str],
                 hyperparams: dict, seed: int = 0) -> FittedPipeline:
    imputer, intervention, model = stages
    prep, X = fit_preprocessor(frame, groups, imputer, intervention, stage_params(hyperparams, intervention))
    return FittedPipeline(prep, fit_model(X, y, model, stage_params(hyperparams, model), seed))


def predict(pipeline: FittedPipeline, frame: Frame, groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores in [0, 1] and hard labels; a score of exactly 0.5 is positive."""
    X = pipeline.preprocessor.transform(frame, groups)
    scores = pipeline.model.predict_proba(X)
    return scores, (scores >= pipeline.threshold).astype(np.int8)


def stage_params(hyperparams: dict, primitive: str) -> dict:
    """Pick ``primitive.param`` entries out of a namespaced assignment."""
    prefix = primitive + "."
    return {k[len(prefix):]: v for k, v in hyperparams.items() if k.startswith(prefix)}

