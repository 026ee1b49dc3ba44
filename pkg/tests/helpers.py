"""Shared builders for the test suite."""
from __future__ import annotations

import copy
from pathlib import Path

import numpy as np

from pipeforge.config import config_from_dict
from pipeforge.metrics import MetricReport
from pipeforge.mobo.surrogate import Encoder
from pipeforge.searchspace import PhysicalPipeline, enumerate_logical_pipelines

BASE_TREE = {
    "pipeline_args": {
        "dataset": None,
        "target_column": "label",
        "positive_label": "1",
        "sensitive_attrs_for_intervention": ["group"],
        "null_imputers": ["median-mode"],
        "fairness_interventions": ["DIR"],
        "models": ["lr_clf", "dt_clf"],
    },
    "optimisation_args": {
        "ref_point": [0.5, 0.5],
        "objectives": [
            {"name": "quality", "metric": "F1", "group": "overall", "weight": 0.5},
            {"name": "parity", "metric": "SRD", "group": "group", "weight": 0.5},
        ],
        "max_total_pipelines_num": 12,
        "num_workers": 1,
        "num_pp_candidates": 4,
        "training_set_fractions_for_halting": [0.5, 1.0],
        "exploration_factor": 0.5,
        "risk_factor": 0.5,
        "cost_measure": "work_units",
    },
    "virny_args": {
        "bootstrap_fraction": 0.8,
        "n_estimators": 5,
        "sensitive_attrs": {"group": "2"},
    },
    "seed": 0,
}


def config_tree(dataset: str | Path, **overrides) -> dict:
    """A small valid config tree. Keyword overrides are looked up in every section."""
    tree = copy.deepcopy(BASE_TREE)
    tree["pipeline_args"]["dataset"] = str(dataset)
    for key, value in overrides.items():
        if key == "seed":
            tree["seed"] = value
            continue
        for section in ("pipeline_args", "optimisation_args", "virny_args"):
            if key in tree[section] or key in _KNOWN[section]:
                tree[section][key] = value
                break
        else:
            raise KeyError(key)
    return tree


_KNOWN = {
    "pipeline_args": {"column_types"},
    "optimisation_args": {"max_time_budget_seconds", "queue_size"},
    "virny_args": {"intersectional_privileged"},
}


def make_config(dataset: str | Path, **overrides):
    return config_from_dict(config_tree(dataset, **overrides))


def random_pipelines(cfg, n, seed):
    rng = np.random.default_rng(seed)
    lps = enumerate_logical_pipelines(cfg)
    out = []
    for i in range(n):
        lp = lps[int(rng.integers(len(lps)))]
        a = Encoder(lp.domain).from_unit(rng.random(len(lp.domain)))
        out.append(PhysicalPipeline(f"pp-{i:06d}", lp.id, a, "random_candidate", int(rng.integers(2**31)), lp.stages))
    return out


def scripted_report(f1, srd, n_rows=10):
    return MetricReport(5, 0.8, n_rows, {"F1": f1, "Accuracy": 0.5, "Label_Stability": 1.0},
                        {"group": {"SRD": srd, "TPRD": 0.0, "TNRD": 0.0, "FNRD": 0.0}})


class ScriptedProfile:
    """Stands in for ``profile``: returns fixed errors for test-side and train-side calls."""

    def __init__(self, test_f1, train_f1):
        self.test_f1, self.train_f1 = test_f1, train_f1
        self.calls = []

    def __call__(self, dataset, stages, hp, train_idx, eval_idx, **kw):
        side = "train" if np.array_equal(train_idx, eval_idx) else "test"
        self.calls.append((side, len(train_idx), kw["n_estimators"]))
        # SRD 0 keeps the weighted error at half the F1 loss
        f1 = self.train_f1 if side == "train" else self.test_f1
        return scripted_report(f1, 0.0)
