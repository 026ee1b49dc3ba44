"""Bootstrap-ensemble profiling: accuracy, stability and group disparity metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from pipeforge.data import Dataset, bootstrap_sample
from pipeforge.learners import fit_model, fit_preprocessor, stage_params

DISPARITIES = ("TPRD", "TNRD", "FNRD", "SRD")


class UndefinedMetric(ArithmeticError):
    """A rate has a zero denominator on one side of a group."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict[str, int]:
        return {"TP": self.tp, "FP": self.fp, "TN": self.tn, "FN": self.fn}


def confusion(labels: np.ndarray, predictions: np.ndarray, mask: np.ndarray | None = None) -> ConfusionCounts:
    labels = np.asarray(labels).astype(bool)
    predictions = np.asarray(predictions).astype(bool)
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions differ in length")
    if mask is not None:
        labels, predictions = labels[mask], predictions[mask]
    return ConfusionCounts(
        tp=int(np.sum(labels & predictions)),
        fp=int(np.sum(~labels & predictions)),
        tn=int(np.sum(~labels & ~predictions)),
        fn=int(np.sum(labels & ~predictions)),
    )


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 0.0


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        raise UndefinedMetric(what)
    return num / den


def tpr(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, "TPR")


def tnr(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp, "TNR")


def fnr(c: ConfusionCounts) -> float:
    return _ratio(c.fn, c.tp + c.fn, "FNR")


def selection_rate(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.fp, c.total, "selection rate")


_RATE_OF = {"TPRD": tpr, "TNRD": tnr, "FNRD": fnr, "SRD": selection_rate}


def disparity(metric: str, counts_dis: ConfusionCounts, counts_priv: ConfusionCounts) -> float:
    """Disadvantaged-minus-privileged difference of the rate behind ``metric``."""
    rate = _RATE_OF[metric]
    return rate(counts_dis) - rate(counts_priv)


def label_stability(positive_votes: np.ndarray, n_estimators: int) -> tuple[np.ndarray, float]:
    """Per-row ``|B+ - B-| / B`` and its mean."""
    if n_estimators <= 0:
        raise ValueError("n_estimators must be positive")
    margin = np.abs(2 * np.asarray(positive_votes, dtype=np.int64) - n_estimators)
    per_row = margin / n_estimators
    # integer sum and a single division, so the mean does not depend on summation order
    return per_row, int(margin.sum()) / (n_estimators * margin.size) if margin.size else 1.0


def _safe(fn, c: ConfusionCounts) -> float | None:
    try:
        return fn(c)
    except UndefinedMetric:
        return None


def _side_summary(c: ConfusionCounts) -> dict[str, Any]:
    return {
        **c.as_dict(),
        "TPR": _safe(tpr, c), "TNR": _safe(tnr, c), "FNR": _safe(fnr, c),
        "SelectionRate": _safe(selection_rate, c),
    }


@dataclass
class MetricReport:
    n_estimators: int
    bootstrap_fraction: float
    n_rows: int
    overall: dict[str, float]
    groups: dict[str, dict[str, Any]] = field(default_factory=dict)
    work: float = 0.0
    degenerate_members: int = 0

    def value(self, metric: str, group: str = "overall") -> float | None:
        """Metric value or None when undefined."""
        if metric in DISPARITIES:
            return self.groups[group][metric]
        return self.overall[metric]

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_estimators": self.n_estimators,
            "bootstrap_fraction": self.bootstrap_fraction,
            "n_rows": self.n_rows,
            "overall": dict(self.overall),
            "groups": {k: dict(v) for k, v in self.groups.items()},
            "work": self.work,
            "degenerate_members": self.degenerate_members,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetricReport":
        return cls(d["n_estimators"], d["bootstrap_fraction"], d["n_rows"], dict(d["overall"]),
                   {k: dict(v) for k, v in d["groups"].items()}, d.get("work", 0.0), d.get("degenerate_members", 0))


def build_report(y_true: np.ndarray, positive_votes: np.ndarray, n_estimators: int, bootstrap_fraction: float,
                 group_masks: dict[str, tuple[np.ndarray, np.ndarray]]) -> MetricReport:
    """Score majority-vote predictions; a tied vote predicts positive."""
    positive_votes = np.asarray(positive_votes)
    pred = (2 * positive_votes >= n_estimators).astype(np.int8)
    overall_c = confusion(y_true, pred)
    _, ls = label_stability(positive_votes, n_estimators)
    overall = {"F1": f1(overall_c), "Accuracy": accuracy(overall_c), "Label_Stability": ls, **overall_c.as_dict()}
    groups = {}
    for name, (dis, priv) in group_masks.items():
        c_dis, c_priv = confusion(y_true, pred, dis), confusion(y_true, pred, priv)
        entry: dict[str, Any] = {"dis": _side_summary(c_dis), "priv": _side_summary(c_priv)}
        for metric in DISPARITIES:
            try:
                entry[metric] = disparity(metric, c_dis, c_priv)
            except UndefinedMetric:
                entry[metric] = None
        groups[name] = entry
    return MetricReport(n_estimators, bootstrap_fraction, len(y_true), overall, groups)


def profile(dataset: Dataset, stages: tuple[str, str, str], hyperparams: dict, train_idx: np.ndarray,
            eval_idx: np.ndarray, *, n_estimators: int, bootstrap_fraction: float, seed: int,
            intervention_codes: np.ndarray) -> MetricReport:
    """Fit ``n_estimators`` members on bootstrap samples of ``train_idx`` and score them on ``eval_idx``.

    Imputation, the intervention and encoding are fitted once on the whole
    training slice; only the model is refitted per member. Members are
    reduced in index order, so the report is a pure function of the inputs.
    """
    imputer, intervention, model = stages
    y = dataset.target
    prep, X_train = fit_preprocessor(dataset.take(train_idx), intervention_codes[train_idx], imputer,
                                     intervention, stage_params(hyperparams, intervention))
    X_eval = prep.transform(dataset.take(eval_idx), intervention_codes[eval_idx])
    y_train = y[train_idx]
    model_params = stage_params(hyperparams, model)
    positions = np.arange(len(train_idx))

    votes = np.zeros(len(eval_idx), dtype=np.int64)
    work = 0.0
    degenerate = 0
    for i in range(n_estimators):
        boot = bootstrap_sample(positions, bootstrap_fraction, seed, i)
        fitted = fit_model(X_train[boot], y_train[boot], model, model_params, seed)
        votes += fitted.predict_proba(X_eval) >= 0.5
        work += fitted.work
        degenerate += fitted.degenerate

    masks = {name: (dis[eval_idx], priv[eval_idx]) for name, (dis, priv) in dataset.group_masks.items()}
    report = build_report(y[eval_idx], votes, n_estimators, bootstrap_fraction, masks)
    report.work = work
    report.degenerate_members = degenerate
    return report
