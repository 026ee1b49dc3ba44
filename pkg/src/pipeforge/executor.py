"""Worker-side task execution: incremental training with early halting."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from pipeforge.config import ExperimentConfig, ObjectiveSpec, objective_to_loss
from pipeforge.data import Dataset, GroupSpec, SplitSpec, define_groups, load_csv, split
from pipeforge.metrics import MetricReport, profile
from pipeforge.searchspace import PhysicalPipeline

TRAIN_SIDE_ESTIMATORS = 10


class MissingMetric(KeyError):
    pass


@dataclass(frozen=True)
class EvaluationProtocol:
    """Everything a worker needs to rebuild the data and score a pipeline."""

    objectives: tuple[ObjectiveSpec, ...]
    groups: tuple[GroupSpec, ...]
    target_column: str
    positive_label: str
    n_estimators: int
    bootstrap_fraction: float
    fractions: tuple[float, ...]
    split_seed: int
    intervention_attrs: tuple[str, ...] = ()
    column_types: tuple[tuple[str, str], ...] = ()
    intersectional_privileged: str = "complement"

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(o.weight for o in self.objectives)

    def to_dict(self) -> dict[str, Any]:
        return {
            "objectives": [[o.name, o.metric, o.group, o.weight] for o in self.objectives],
            "groups": [[g.name, list(g.attributes), [list(v) for v in g.disadvantaged_values]] for g in self.groups],
            "target_column": self.target_column,
            "positive_label": self.positive_label,
            "n_estimators": self.n_estimators,
            "bootstrap_fraction": self.bootstrap_fraction,
            "fractions": list(self.fractions),
            "split_seed": self.split_seed,
            "intervention_attrs": list(self.intervention_attrs),
            "column_types": [list(c) for c in self.column_types],
            "intersectional_privileged": self.intersectional_privileged,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvaluationProtocol":
        return cls(
            objectives=tuple(ObjectiveSpec(n, m, g, float(w)) for n, m, g, w in d["objectives"]),
            groups=tuple(GroupSpec(n, tuple(a), tuple(tuple(v) for v in vals)) for n, a, vals in d["groups"]),
            target_column=d["target_column"],
            positive_label=d["positive_label"],
            n_estimators=int(d["n_estimators"]),
            bootstrap_fraction=float(d["bootstrap_fraction"]),
            fractions=tuple(float(f) for f in d["fractions"]),
            split_seed=int(d["split_seed"]),
            intervention_attrs=tuple(d.get("intervention_attrs", ())),
            column_types=tuple(tuple(c) for c in d.get("column_types", ())),
            intersectional_privileged=d.get("intersectional_privileged", "complement"),
        )


def protocol_from_config(cfg: ExperimentConfig) -> EvaluationProtocol:
    return EvaluationProtocol(
        objectives=cfg.objectives,
        groups=cfg.sensitive_attrs,
        target_column=cfg.target_column,
        positive_label=cfg.positive_label,
        n_estimators=cfg.n_estimators,
        bootstrap_fraction=cfg.bootstrap_fraction,
        fractions=cfg.training_set_fractions_for_halting,
        split_seed=cfg.seed,
        intervention_attrs=cfg.sensitive_attrs_for_intervention,
        column_types=cfg.column_types,
        intersectional_privileged=cfg.intersectional_privileged,
    )


@dataclass
class EvalContext:
    """A loaded dataset with its groups, the run's split and intervention group codes."""

    dataset: Dataset
    split: SplitSpec
    codes: np.ndarray
    protocol: EvaluationProtocol


def intervention_codes(dataset: Dataset, attrs: Sequence[str]) -> np.ndarray:
    """One integer per row identifying its combination of ``attrs`` values (-1 when any is missing)."""
    n = dataset.n_rows
    if not attrs:
        return np.zeros(n, dtype=np.int64)
    keys = list(zip(*(dataset.sensitive[a] for a in attrs)))
    table: dict[tuple, int] = {}
    for k in sorted({k for k in keys if None not in k}):
        table[k] = len(table)
    return np.array([table.get(k, -1) for k in keys], dtype=np.int64)


def prepare_context(protocol: EvaluationProtocol, dataset_path: str) -> EvalContext:
    sensitive = []
    for g in protocol.groups:
        sensitive.extend(a for a in g.attributes if a not in sensitive)
    sensitive.extend(a for a in protocol.intervention_attrs if a not in sensitive)
    ds = load_csv(dataset_path, protocol.target_column, protocol.positive_label, dict(protocol.column_types),
                  tuple(sensitive))
    ds = define_groups(ds, protocol.groups, protocol.intersectional_privileged)
    attrs = protocol.intervention_attrs or tuple(g.attributes[0] for g in protocol.groups if len(g.attributes) == 1)
    return EvalContext(ds, split(ds, protocol.split_seed), intervention_codes(ds, attrs), protocol)


@dataclass
class Task:
    task_id: str
    pipeline: PhysicalPipeline
    fractions: tuple[float, ...]
    weights: tuple[float, ...]
    best_known_error: float
    seed: int
    split_seed: int

    def __post_init__(self):
        fr = tuple(self.fractions)
        if not fr or fr[-1] != 1.0 or any(b <= a for a, b in zip(fr, fr[1:])) or fr[0] <= 0:
            raise ValueError(f"fractions must be strictly increasing and end at 1.0, got {fr}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "pipeline": self.pipeline.to_dict(),
            "fractions": list(self.fractions),
            "weights": list(self.weights),
            "best_known_error": None if math.isinf(self.best_known_error) else self.best_known_error,
            "seed": self.seed,
            "split_seed": self.split_seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Task":
        best = d.get("best_known_error")
        return cls(d["task_id"], PhysicalPipeline.from_dict(d["pipeline"]), tuple(d["fractions"]),
                   tuple(d["weights"]), math.inf if best is None else float(best), int(d["seed"]),
                   int(d["split_seed"]))


VOLATILE_FIELDS = ("wall_time_seconds", "worker_id")


@dataclass
class Observation:
    task_id: str
    lp_id: str
    pp_id: str
    losses: list[float]
    weighted_error: float
    report: MetricReport | None
    fraction_reached: float
    halted: bool
    wall_time_seconds: float = 0.0
    worker_id: str = ""
    failed: bool = False
    error: str | None = None
    work: float = 0.0
    pipeline: PhysicalPipeline | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self, volatile: bool = True) -> dict[str, Any]:
        d = {
            "task_id": self.task_id,
            "lp_id": self.lp_id,
            "pp_id": self.pp_id,
            "losses": list(self.losses),
            "weighted_error": self.weighted_error,
            "fraction_reached": self.fraction_reached,
            "halted": self.halted,
            "failed": self.failed,
            "error": self.error,
            "work": self.work,
            "pipeline": self.pipeline.to_dict() if self.pipeline else None,
            "report": self.report.to_dict() if self.report else None,
        }
        if volatile:
            d["wall_time_seconds"] = self.wall_time_seconds
            d["worker_id"] = self.worker_id
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Observation":
        known = {"task_id", "lp_id", "pp_id", "losses", "weighted_error", "fraction_reached", "halted", "failed",
                 "error", "work", "pipeline", "report", "wall_time_seconds", "worker_id"}
        return cls(
            task_id=d["task_id"], lp_id=d["lp_id"], pp_id=d["pp_id"], losses=list(d["losses"]),
            weighted_error=d["weighted_error"],
            report=MetricReport.from_dict(d["report"]) if d.get("report") else None,
            fraction_reached=d["fraction_reached"], halted=d["halted"],
            wall_time_seconds=d.get("wall_time_seconds", 0.0), worker_id=d.get("worker_id", ""),
            failed=d.get("failed", False), error=d.get("error"), work=d.get("work", 0.0),
            pipeline=PhysicalPipeline.from_dict(d["pipeline"]) if d.get("pipeline") else None,
            extra={k: v for k, v in d.items() if k not in known},
        )


def weighted_error(report: MetricReport, objectives: Sequence[ObjectiveSpec]) -> tuple[list[float], float]:
    """Per-objective losses in [0, 1] and their weighted sum. Undefined metrics cost 1.0."""
    losses = []
    for o in objectives:
        try:
            value = report.value(o.metric, o.group)
        except KeyError:
            raise MissingMetric(f"{o.metric} for group {o.group!r} not in report") from None
        losses.append(1.0 if value is None else objective_to_loss(value, o))
    return losses, float(sum(o.weight * l for o, l in zip(objectives, losses)))


ProfileFn = Callable[..., MetricReport]


def train_prefix(split_spec: SplitSpec, fraction: float, shuffle_seed: int) -> np.ndarray:
    """Rows for one training fraction: a prefix of the seed-shuffled train set, returned sorted.

    Prefixes of one permutation nest, so smaller fractions are subsets of
    larger ones; at fraction 1.0 the result equals the full train set.
    """
    train = split_spec.train_indices
    order = np.random.default_rng([shuffle_seed, 0x5EED]).permutation(len(train))
    n = max(2, int(math.floor(fraction * len(train) + 1e-9)))
    return np.sort(train[order[:n]])


def run_aps(task: Task, ctx: EvalContext, *, profile_fn: ProfileFn = profile, worker_id: str = "",
            clock: Callable[[], float] = time.perf_counter) -> Observation:
    """Train on growing fractions and stop once the training error exceeds the best known error."""
    pp = task.pipeline
    proto = ctx.protocol
    test_idx = ctx.split.test_indices
    start = clock()
    best = task.best_known_error
    work = 0.0
    obs = None
    try:
        for i, fraction in enumerate(task.fractions):
            rows = train_prefix(ctx.split, fraction, task.split_seed)
            report = profile_fn(ctx.dataset, pp.stages, pp.assignment, rows, test_idx,
                                n_estimators=proto.n_estimators, bootstrap_fraction=proto.bootstrap_fraction,
                                seed=task.seed, intervention_codes=ctx.codes)
            work += report.work
            losses, err_test = weighted_error(report, proto.objectives)
            best = min(best, err_test)
            obs = Observation(task.task_id, pp.logical_pipeline_id, pp.id, losses, err_test, report, fraction,
                              halted=False, pipeline=pp)
            if i == len(task.fractions) - 1:
                break
            train_report = profile_fn(ctx.dataset, pp.stages, pp.assignment, rows, rows,
                                      n_estimators=min(TRAIN_SIDE_ESTIMATORS, proto.n_estimators),
                                      bootstrap_fraction=proto.bootstrap_fraction, seed=task.seed,
                                      intervention_codes=ctx.codes)
            work += train_report.work
            _, err_train = weighted_error(train_report, proto.objectives)
            if err_train > best:
                obs.halted = True
                break
    except Exception as exc:  # noqa: BLE001 - any learner failure becomes a worst-case observation
        n = len(proto.objectives)
        obs = Observation(task.task_id, pp.logical_pipeline_id, pp.id, [1.0] * n, float(sum(proto.weights)), None,
                          0.0, halted=False, failed=True, error=f"{type(exc).__name__}: {exc}", pipeline=pp)
    obs.work = work
    obs.wall_time_seconds = clock() - start
    obs.worker_id = worker_id
    return obs
