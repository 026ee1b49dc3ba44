"""Experiment configuration: parsing, defaults and validation.

The file layout follows the sectioned YAML format used by fairness-aware
pipeline search tools::

    pipeline_args:
      dataset: "data/folk.csv"
      target_column: "ESR"
      positive_label: "1"
      sensitive_attrs_for_intervention: ["SEX", "RAC1P"]
      null_imputers: ["median-mode"]
      fairness_interventions: ["DIR"]
      models: ["lr_clf", "dt_clf"]

    optimisation_args:
      ref_point: [0.40, 0.10]
      objectives:
        - {name: "obj_1", metric: "F1", group: "overall", weight: 0.5}
        - {name: "obj_2", metric: "SRD", group: "SEX&RAC1P", weight: 0.5}
      max_total_pipelines_num: 100
      num_workers: 4
      num_pp_candidates: 4
      training_set_fractions_for_halting: [0.5, 1.0]
      exploration_factor: 0.5
      risk_factor: 0.5

    virny_args:
      bootstrap_fraction: 0.8
      n_estimators: 50
      sensitive_attrs: {SEX: '2', RAC1P: ['2', '3'], SEX&RAC1P: None}

    seed: 42

Unknown keys are rejected at every level.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from pipeforge.data import GroupSpec

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "PIPEFORGE_SEED"

MAXIMIZE_METRICS = ("F1", "Accuracy", "Label_Stability")
DISPARITY_METRICS = ("TPRD", "TNRD", "FNRD", "SRD")
METRICS = MAXIMIZE_METRICS + DISPARITY_METRICS

IMPUTERS = ("median-mode", "mean-mode", "constant")
INTERVENTIONS = ("dir_repair", "none")
MODELS = ("lr_clf", "dt_clf", "majority_clf")
INTERVENTION_ALIASES = {"DIR": "dir_repair"}

COST_MEASURES = ("wall_time", "work_units")
INTERSECTIONAL_PRIVILEGED = ("complement", "conjunction")


class ParseError(Exception):
    """The config file could not be read as a key tree."""


class ValidationError(ValueError):
    """A config value violates a documented invariant."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class ObjectiveSpec:
    name: str
    metric: str
    group: str
    weight: float

    @property
    def direction(self) -> str:
        return "maximize" if self.metric in MAXIMIZE_METRICS else "minimize_abs"

    @property
    def is_disparity(self) -> bool:
        return self.metric in DISPARITY_METRICS


@dataclass(frozen=True)
class StageSpace:
    imputers: tuple[str, ...]
    interventions: tuple[str, ...]
    models: tuple[str, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_path: str
    target_column: str
    positive_label: str
    sensitive_attrs: tuple[GroupSpec, ...]
    stages: StageSpace
    objectives: tuple[ObjectiveSpec, ...]
    ref_point: tuple[float, ...]
    max_total_pipelines_num: int
    max_time_budget_seconds: float | None = None
    num_workers: int = 4
    num_pp_candidates: int = 4
    queue_size: int = 8
    training_set_fractions_for_halting: tuple[float, ...] = (0.5, 1.0)
    exploration_factor: float = 0.5
    risk_factor: float = 0.5
    bootstrap_fraction: float = 0.8
    n_estimators: int = 50
    seed: int = 0
    sensitive_attrs_for_intervention: tuple[str, ...] = ()
    column_types: tuple[tuple[str, str], ...] = ()
    cost_measure: str = "wall_time"
    intersectional_privileged: str = "complement"

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(o.weight for o in self.objectives)

    @property
    def n_objectives(self) -> int:
        return len(self.objectives)

    def group(self, name: str) -> GroupSpec:
        for g in self.sensitive_attrs:
            if g.name == name:
                return g
        raise KeyError(name)

    def config_hash(self) -> str:
        """Identity of the experiment. The worker count is left out: it changes speed, not results."""
        tree = config_to_dict(self)
        del tree["optimisation_args"]["num_workers"]
        blob = json.dumps(tree, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTION_KEYS = {
    "pipeline_args": {
        "dataset", "target_column", "positive_label", "sensitive_attrs_for_intervention",
        "null_imputers", "fairness_interventions", "models", "column_types",
    },
    "optimisation_args": {
        "ref_point", "objectives", "max_total_pipelines_num", "max_time_budget_seconds",
        "num_workers", "num_pp_candidates", "queue_size", "training_set_fractions_for_halting",
        "exploration_factor", "risk_factor", "cost_measure",
    },
    "virny_args": {
        "bootstrap_fraction", "n_estimators", "sensitive_attrs", "intersectional_privileged",
    },
}
_TOP_KEYS = set(_SECTION_KEYS) | {"seed"}
_OBJECTIVE_KEYS = {"name", "metric", "group", "weight"}

# `{SEX:'2'}` is not a mapping in YAML flow style; configs copied from
# notebooks often use it anyway.
_FLOW_KEY_FIX = re.compile(r"([A-Za-z_][\w&]*):(?=['\"\[])")


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        tree = yaml.safe_load(_FLOW_KEY_FIX.sub(r"\1: ", text))
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(tree, dict):
        raise ParseError(f"{path}: top level must be a mapping")
    return config_from_dict(tree, base_dir=path.parent)


def config_from_dict(tree: dict[str, Any], base_dir: str | os.PathLike | None = None) -> ExperimentConfig:
    _reject_unknown(tree, _TOP_KEYS, "")
    sections = {}
    for name, allowed in _SECTION_KEYS.items():
        sec = tree.get(name) or {}
        if not isinstance(sec, dict):
            raise ValidationError(name, "must be a mapping")
        _reject_unknown(sec, allowed, name + ".")
        sections[name] = sec
    p, o, v = sections["pipeline_args"], sections["optimisation_args"], sections["virny_args"]

    dataset = p.get("dataset")
    if not dataset:
        raise ValidationError("pipeline_args.dataset", "required")
    dataset = Path(str(dataset))
    if base_dir is not None and not dataset.is_absolute():
        dataset = (Path(base_dir) / dataset).resolve()
    target = p.get("target_column")
    if not target:
        raise ValidationError("pipeline_args.target_column", "required")

    groups = _parse_groups(v.get("sensitive_attrs") or {})
    group_names = {g.name for g in groups}
    single_attrs = [g.attributes[0] for g in groups if len(g.attributes) == 1]

    stages = StageSpace(
        imputers=_names(p.get("null_imputers", ["median-mode"]), "pipeline_args.null_imputers", IMPUTERS),
        interventions=_names(
            [INTERVENTION_ALIASES.get(str(n), n) for n in p.get("fairness_interventions") or []],
            "pipeline_args.fairness_interventions", INTERVENTIONS, allow_empty=True,
        ),
        models=_names(p.get("models"), "pipeline_args.models", MODELS),
    )

    objectives = _parse_objectives(o.get("objectives"), group_names)
    weights = [ob.weight for ob in objectives]

    ref_point = o.get("ref_point")
    if ref_point is None:
        ref_point = list(weights)
    ref_point = tuple(_real(x, "optimisation_args.ref_point") for x in _as_list(ref_point, "optimisation_args.ref_point"))
    if len(ref_point) != len(objectives):
        raise ValidationError("optimisation_args.ref_point", f"length {len(ref_point)} != {len(objectives)} objectives")

    num_workers = _pos_int(o.get("num_workers", 4), "optimisation_args.num_workers")
    k = _pos_int(o.get("num_pp_candidates", 4), "optimisation_args.num_pp_candidates")
    queue_size = _pos_int(o.get("queue_size", max(2 * num_workers, k)), "optimisation_args.queue_size")
    if k > queue_size:
        raise ValidationError("optimisation_args.num_pp_candidates", f"k={k} exceeds queue_size={queue_size}")
    if queue_size < num_workers:
        logger.warning("queue_size=%d is smaller than num_workers=%d; workers may idle", queue_size, num_workers)

    fractions = tuple(
        _real(f, "optimisation_args.training_set_fractions_for_halting")
        for f in _as_list(o.get("training_set_fractions_for_halting", [0.5, 1.0]),
                          "optimisation_args.training_set_fractions_for_halting")
    )
    _check_fractions(fractions, "optimisation_args.training_set_fractions_for_halting")

    beta = _real(o.get("exploration_factor", 0.5), "optimisation_args.exploration_factor")
    if not 0.0 <= beta <= 1.0:
        raise ValidationError("optimisation_args.exploration_factor", "must lie in [0, 1]")
    theta = _real(o.get("risk_factor", 0.5), "optimisation_args.risk_factor")
    if theta < 0:
        raise ValidationError("optimisation_args.risk_factor", "must be >= 0")

    budget = _pos_int(o.get("max_total_pipelines_num"), "optimisation_args.max_total_pipelines_num")
    time_budget = o.get("max_time_budget_seconds")
    if time_budget is not None:
        time_budget = _real(time_budget, "optimisation_args.max_time_budget_seconds")
        if time_budget <= 0:
            raise ValidationError("optimisation_args.max_time_budget_seconds", "must be positive")

    cost_measure = o.get("cost_measure", "wall_time")
    if cost_measure not in COST_MEASURES:
        raise ValidationError("optimisation_args.cost_measure", f"must be one of {COST_MEASURES}")

    bootstrap_fraction = _real(v.get("bootstrap_fraction", 0.8), "virny_args.bootstrap_fraction")
    if not 0.0 < bootstrap_fraction <= 1.0:
        raise ValidationError("virny_args.bootstrap_fraction", "must lie in (0, 1]")
    n_estimators = _pos_int(v.get("n_estimators", 50), "virny_args.n_estimators")
    inter_priv = v.get("intersectional_privileged", "complement")
    if inter_priv not in INTERSECTIONAL_PRIVILEGED:
        raise ValidationError("virny_args.intersectional_privileged", f"must be one of {INTERSECTIONAL_PRIVILEGED}")

    for_intervention = p.get("sensitive_attrs_for_intervention")
    if for_intervention is None:
        for_intervention = single_attrs
    for_intervention = tuple(str(a) for a in _as_list(for_intervention, "pipeline_args.sensitive_attrs_for_intervention"))
    for a in for_intervention:
        if a not in single_attrs:
            raise ValidationError("pipeline_args.sensitive_attrs_for_intervention", f"{a!r} is not a declared sensitive attribute")

    column_types = p.get("column_types") or {}
    if not isinstance(column_types, dict):
        raise ValidationError("pipeline_args.column_types", "must be a mapping")
    for col, kind in column_types.items():
        if kind not in ("numeric", "categorical"):
            raise ValidationError("pipeline_args.column_types", f"{col}: kind must be numeric or categorical")

    seed = tree.get("seed", 0)
    if os.environ.get(SEED_ENV_VAR):
        seed = os.environ[SEED_ENV_VAR]
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ValidationError("seed", f"not an integer: {seed!r}") from None
    if seed < 0:
        raise ValidationError("seed", "must be unsigned")

    return ExperimentConfig(
        dataset_path=str(dataset),
        target_column=str(target),
        positive_label=str(p.get("positive_label", "1")).strip(),
        sensitive_attrs=groups,
        stages=stages,
        objectives=objectives,
        ref_point=ref_point,
        max_total_pipelines_num=budget,
        max_time_budget_seconds=time_budget,
        num_workers=num_workers,
        num_pp_candidates=k,
        queue_size=queue_size,
        training_set_fractions_for_halting=fractions,
        exploration_factor=beta,
        risk_factor=theta,
        bootstrap_fraction=bootstrap_fraction,
        n_estimators=n_estimators,
        seed=seed,
        sensitive_attrs_for_intervention=for_intervention,
        column_types=tuple(sorted((str(c), str(t)) for c, t in column_types.items())),
        cost_measure=cost_measure,
        intersectional_privileged=inter_priv,
    )


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """Inverse of :func:`config_from_dict` (with every default made explicit)."""
    attrs: dict[str, Any] = {}
    for g in cfg.sensitive_attrs:
        if len(g.attributes) == 1:
            vals = list(g.disadvantaged_values[0])
            attrs[g.name] = vals[0] if len(vals) == 1 else vals
        else:
            attrs[g.name] = None
    return {
        "pipeline_args": {
            "dataset": cfg.dataset_path,
            "target_column": cfg.target_column,
            "positive_label": cfg.positive_label,
            "sensitive_attrs_for_intervention": list(cfg.sensitive_attrs_for_intervention),
            "null_imputers": list(cfg.stages.imputers),
            "fairness_interventions": list(cfg.stages.interventions),
            "models": list(cfg.stages.models),
            "column_types": dict(cfg.column_types),
        },
        "optimisation_args": {
            "ref_point": list(cfg.ref_point),
            "objectives": [dataclasses.asdict(o) for o in cfg.objectives],
            "max_total_pipelines_num": cfg.max_total_pipelines_num,
            "max_time_budget_seconds": cfg.max_time_budget_seconds,
            "num_workers": cfg.num_workers,
            "num_pp_candidates": cfg.num_pp_candidates,
            "queue_size": cfg.queue_size,
            "training_set_fractions_for_halting": list(cfg.training_set_fractions_for_halting),
            "exploration_factor": cfg.exploration_factor,
            "risk_factor": cfg.risk_factor,
            "cost_measure": cfg.cost_measure,
        },
        "virny_args": {
            "bootstrap_fraction": cfg.bootstrap_fraction,
            "n_estimators": cfg.n_estimators,
            "sensitive_attrs": attrs,
            "intersectional_privileged": cfg.intersectional_privileged,
        },
        "seed": cfg.seed,
    }


def dump_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False), encoding="utf-8")


def objective_to_loss(metric_value: float, spec: ObjectiveSpec) -> float:
    """Map a raw metric value to a loss in [0, 1] where lower is better."""
    if spec.direction == "maximize":
        return 1.0 - min(1.0, max(0.0, metric_value))
    return min(1.0, abs(metric_value))


def _parse_groups(raw: Any) -> tuple[GroupSpec, ...]:
    if not isinstance(raw, dict):
        raise ValidationError("virny_args.sensitive_attrs", "must be a mapping")
    singles: dict[str, GroupSpec] = {}
    pending = []
    for name, values in raw.items():
        name = str(name)
        if "&" in name:
            pending.append((name, values))
            continue
        if values is None or values == "None":
            raise ValidationError("virny_args.sensitive_attrs", f"{name}: disadvantaged values required")
        vals = values if isinstance(values, list) else [values]
        if not vals:
            raise ValidationError("virny_args.sensitive_attrs", f"{name}: empty value list")
        singles[name] = GroupSpec(name, (name,), (tuple(str(x).strip() for x in vals),))
    groups = list(singles.values())
    for name, values in pending:
        if values not in (None, "None"):
            raise ValidationError("virny_args.sensitive_attrs", f"{name}: intersections take no values (use None)")
        parts = name.split("&")
        if len(parts) != 2 or any(part not in singles for part in parts):
            raise ValidationError("virny_args.sensitive_attrs", f"{name}: must join two declared attributes")
        groups.append(GroupSpec(
            name, tuple(parts), tuple(singles[part].disadvantaged_values[0] for part in parts),
        ))
    return tuple(groups)


def _parse_objectives(raw: Any, group_names: set[str]) -> tuple[ObjectiveSpec, ...]:
    if not raw:
        raise ValidationError("optimisation_args.objectives", "at least one objective required")
    objectives = []
    for i, item in enumerate(_as_list(raw, "optimisation_args.objectives")):
        if not isinstance(item, dict):
            raise ValidationError("optimisation_args.objectives", f"entry {i} must be a mapping")
        _reject_unknown(item, _OBJECTIVE_KEYS, "optimisation_args.objectives.")
        metric = item.get("metric")
        if metric not in METRICS:
            raise ValidationError("objectives.metric", f"unknown metric {metric!r}")
        group = str(item.get("group", "overall"))
        if metric in DISPARITY_METRICS:
            if group == "overall":
                raise ValidationError("objectives.group", f"{metric} needs a sensitive group")
            if group not in group_names:
                raise ValidationError("objectives.group", f"undeclared group {group!r}")
        elif group != "overall":
            raise ValidationError("objectives.group", f"{metric} is only supported on 'overall'")
        weight = _real(item.get("weight"), "objectives.weight")
        if not 0.0 < weight <= 1.0:
            raise ValidationError("objectives.weight", f"weight {weight} outside (0, 1]")
        objectives.append(ObjectiveSpec(str(item.get("name", f"obj_{i + 1}")), metric, group, weight))
    total = sum(o.weight for o in objectives)
    if abs(total - 1.0) > 1e-9:
        raise ValidationError("objectives.weight", f"weights sum to {total}, expected 1")
    if len({o.name for o in objectives}) != len(objectives):
        raise ValidationError("objectives.name", "duplicate objective names")
    return tuple(objectives)


def _check_fractions(fractions: tuple[float, ...], name: str) -> None:
    if not fractions:
        raise ValidationError(name, "empty")
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValidationError(name, "fractions must lie in (0, 1]")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValidationError(name, "must be strictly increasing")
    if fractions[-1] != 1.0:
        raise ValidationError(name, "last fraction must be 1.0")


def _names(raw: Any, name: str, allowed: tuple[str, ...], allow_empty: bool = False) -> tuple[str, ...]:
    items = [str(x) for x in _as_list(raw if raw is not None else [], name)]
    if not items and not allow_empty:
        raise ValidationError(name, "at least one entry required")
    if len(set(items)) != len(items):
        raise ValidationError(name, "duplicate names")
    for item in items:
        if item not in allowed:
            raise ValidationError(name, f"unknown primitive {item!r}; expected one of {allowed}")
    return tuple(items)


def _reject_unknown(tree: dict, allowed: set[str], prefix: str) -> None:
    unknown = sorted(str(k) for k in tree if k not in allowed)
    if unknown:
        raise ValidationError(prefix + unknown[0], "unknown key")


def _as_list(raw: Any, name: str) -> list:
    if not isinstance(raw, (list, tuple)):
        raise ValidationError(name, "must be a list")
    return list(raw)


def _real(raw: Any, name: str) -> float:
    if isinstance(raw, bool):
        raise ValidationError(name, f"not a number: {raw!r}")
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise ValidationError(name, f"not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise ValidationError(name, "must be finite")
    return value


def _pos_int(raw: Any, name: str) -> int:
    if raw is None:
        raise ValidationError(name, "required")
    if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw or raw < 1:
        raise ValidationError(name, f"must be a positive integer, got {raw!r}")
    return int(raw)
