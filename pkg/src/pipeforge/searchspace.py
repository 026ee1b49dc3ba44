"""Logical pipelines (stage choices with open hyperparameters) and their physical instances."""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

from pipeforge.config import ExperimentConfig, StageSpace, ValidationError
from pipeforge.learners import REGISTRY, CategoricalDomain, Domain, IntDomain, PrimitiveSpec, RealDomain


class EmptySearchSpace(ValueError):
    pass


@dataclass
class LogicalPipeline:
    id: str
    imputer: str
    intervention: str
    model: str
    domain: dict[str, Domain]
    status: str = "unseen"

    @property
    def stages(self) -> tuple[str, str, str]:
        return (self.imputer, self.intervention, self.model)

    @property
    def label(self) -> str:
        return " -> ".join(self.stages)

    def domain_size(self) -> int | None:
        """Number of distinct assignments, or None if any dimension is continuous."""
        size = 1
        for dom in self.domain.values():
            if not dom.finite:
                return None
            size *= dom.size
        return size


@dataclass
class PhysicalPipeline:
    id: str
    logical_pipeline_id: str
    assignment: dict[str, Any]
    origin: str
    seed: int
    stages: tuple[str, str, str] = field(default=("", "", ""))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id, "logical_pipeline_id": self.logical_pipeline_id,
            "assignment": dict(self.assignment), "origin": self.origin, "seed": self.seed,
            "stages": list(self.stages),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PhysicalPipeline":
        return cls(d["id"], d["logical_pipeline_id"], dict(d["assignment"]), d["origin"], int(d["seed"]),
                   tuple(d["stages"]))


def assignment_key(assignment: Mapping[str, Any]) -> str:
    return json.dumps(assignment, sort_keys=True, separators=(",", ":"))


def _describe(domain: Mapping[str, Domain]) -> str:
    return ";".join(f"{k}={type(v).__name__}{v.describe()}" for k, v in sorted(domain.items()))


def enumerate_logical_pipelines(stages: StageSpace | ExperimentConfig,
                                registry: Mapping[str, PrimitiveSpec] = REGISTRY) -> list[LogicalPipeline]:
    """Cartesian product of imputers x (interventions + "none") x models."""
    if isinstance(stages, ExperimentConfig):
        stages = stages.stages
    interventions = list(stages.interventions)
    if "none" not in interventions:
        interventions.append("none")
    choices = {"imputer": list(stages.imputers), "intervention": interventions, "model": list(stages.models)}
    for stage, names in choices.items():
        if len(set(names)) != len(names):
            raise ValidationError(f"stages.{stage}", "duplicate names")
        for name in names:
            spec = registry.get(name)
            if spec is None or spec.stage != stage:
                raise ValidationError(f"stages.{stage}", f"unknown {stage} {name!r}")
    if not choices["imputer"] or not choices["model"]:
        raise EmptySearchSpace("need at least one imputer and one model")

    lps = []
    for imp, inter, model in itertools.product(choices["imputer"], choices["intervention"], choices["model"]):
        domain: dict[str, Domain] = {}
        for name in (imp, inter, model):
            for dim, dom in registry[name].domain.items():
                domain[f"{name}.{dim}"] = dom
        digest = hashlib.sha1(f"{imp}|{inter}|{model}|{_describe(domain)}".encode()).hexdigest()[:12]
        lps.append(LogicalPipeline(f"lp-{digest}", imp, inter, model, domain))
    return lps


def validate_assignment(lp: LogicalPipeline, assignment: Mapping[str, Any]) -> list[str]:
    """Return a list of violations; an empty list means the assignment is valid."""
    violations = []
    for dim, dom in lp.domain.items():
        if dim not in assignment:
            violations.append(f"missing {dim}")
            continue
        value = assignment[dim]
        if isinstance(dom, RealDomain):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
                violations.append(f"{dim}: expected a real, got {value!r}")
            elif not dom.contains(value):
                violations.append(f"{dim}: {value} out of {dom.describe()}")
        elif isinstance(dom, IntDomain):
            if isinstance(value, bool) or not isinstance(value, int):
                violations.append(f"{dim}: expected an integer, got {value!r}")
            elif not dom.contains(value):
                violations.append(f"{dim}: {value} out of {dom.describe()}")
        elif isinstance(dom, CategoricalDomain) and not dom.contains(value):
            violations.append(f"{dim}: {value!r} not in {dom.describe()}")
    for dim in assignment:
        if dim not in lp.domain:
            violations.append(f"unknown dimension {dim}")
    return violations
