"""Tabular data: CSV loading, sensitive groups, splits and bootstrap samples."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

NULL_TOKENS = frozenset({"", "NA", "N/A", "NaN", "nan", "null", "NULL", "None", "?"})


class SchemaError(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    """A sensitive group: one attribute, or the intersection of two.

    ``disadvantaged_values[j]`` lists the codes of ``attributes[j]`` that mark a
    row as disadvantaged. Non-null codes outside that set are privileged.
    """

    name: str
    attributes: tuple[str, ...]
    disadvantaged_values: tuple[tuple[str, ...], ...]


@dataclass(frozen=True)
class SplitSpec:
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int


@dataclass
class Frame:
    """Column-oriented slice of a dataset.

    Numeric columns are float64 with NaN for missing cells; categorical
    columns are object arrays of stripped strings with None for missing.
    """

    columns: dict[str, np.ndarray]
    kinds: dict[str, str]

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    @property
    def n_rows(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    def take(self, indices: np.ndarray) -> "Frame":
        return Frame({c: v[indices] for c, v in self.columns.items()}, dict(self.kinds))

    def null_count(self) -> int:
        return sum(int(_null_mask(v, self.kinds[c]).sum()) for c, v in self.columns.items())


@dataclass
class Dataset:
    features: Frame
    target: np.ndarray
    sensitive: dict[str, np.ndarray] = field(default_factory=dict)
    group_masks: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return len(self.target)

    def take(self, indices: np.ndarray) -> Frame:
        return self.features.take(indices)


def _null_mask(values: np.ndarray, kind: str) -> np.ndarray:
    if kind == "numeric":
        return np.isnan(values)
    return np.array([v is None for v in values], dtype=bool)


def _parse_float(token: str) -> float | None:
    try:
        return float(token)
    except ValueError:
        return None


def load_csv(
    path: str | os.PathLike,
    target_column: str,
    positive_label: str = "1",
    schema_hints: dict[str, str] | None = None,
    sensitive_columns: tuple[str, ...] = (),
) -> Dataset:
    """Load a CSV with a header row into a typed :class:`Dataset`.

    A column is numeric when every non-null cell parses as a float, unless
    ``schema_hints`` says otherwise. Sensitive columns are always read as
    categorical codes and are kept out of the model features.
    """
    schema_hints = dict(schema_hints or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path}: no header row") from None
        rows = [r for r in reader if r]
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names")
    if target_column not in header:
        raise SchemaError(f"{path}: target column {target_column!r} missing")
    for col in sensitive_columns:
        if col not in header:
            raise SchemaError(f"{path}: sensitive column {col!r} missing")
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")
    width = len(header)
    for lineno, r in enumerate(rows, start=2):
        if len(r) != width:
            raise SchemaError(f"{path}:{lineno}: expected {width} cells, got {len(r)}")

    raw = {h: [r[j].strip() for r in rows] for j, h in enumerate(header)}

    labels = raw.pop(target_column)
    if any(t in NULL_TOKENS for t in labels):
        raise SchemaError("target column contains missing values")
    distinct = set(labels)
    if len(distinct) > 2:
        raise SchemaError(f"target column has {len(distinct)} distinct values, expected 2")
    if positive_label not in distinct:
        raise SchemaError(f"positive label {positive_label!r} absent from target column")
    target = np.array([t == positive_label for t in labels], dtype=np.int8)

    sensitive = {}
    for col in sensitive_columns:
        sensitive[col] = np.array([None if t in NULL_TOKENS else t for t in raw.pop(col)], dtype=object)

    columns: dict[str, np.ndarray] = {}
    kinds: dict[str, str] = {}
    for col, cells in raw.items():
        kind = schema_hints.get(col)
        if kind is None:
            parsed = [None if t in NULL_TOKENS else _parse_float(t) for t in cells]
            numeric = all(p is not None for p, t in zip(parsed, cells) if t not in NULL_TOKENS)
            kind = "numeric" if numeric else "categorical"
        if kind == "numeric":
            vals = []
            for t in cells:
                if t in NULL_TOKENS:
                    vals.append(math.nan)
                    continue
                v = _parse_float(t)
                if v is None:
                    raise SchemaError(f"column {col!r} declared numeric but has {t!r}")
                vals.append(v)
            columns[col] = np.array(vals, dtype=float)
        elif kind == "categorical":
            columns[col] = np.array([None if t in NULL_TOKENS else t for t in cells], dtype=object)
        else:
            raise SchemaError(f"unknown column kind {kind!r} for {col!r}")
        kinds[col] = kind
    return Dataset(Frame(columns, kinds), target, sensitive)


def define_groups(dataset: Dataset, groups: tuple[GroupSpec, ...], intersectional_privileged: str = "complement") -> Dataset:
    """Attach (disadvantaged, privileged) row masks for every group.

    Rows whose attribute is missing belong to neither side. For an
    intersection ``A&B`` the disadvantaged side is the conjunction of the
    constituents' disadvantaged masks; the privileged side is either every
    other row with both attributes present (``complement``) or the
    conjunction of the constituents' privileged masks (``conjunction``).
    """
    masks: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for g in groups:
        dis_parts, priv_parts, present = [], [], np.ones(dataset.n_rows, dtype=bool)
        for attr, dis_values in zip(g.attributes, g.disadvantaged_values):
            if attr not in dataset.sensitive:
                raise SchemaError(f"group {g.name!r}: attribute {attr!r} not loaded as sensitive")
            col = dataset.sensitive[attr]
            has = np.array([v is not None for v in col], dtype=bool)
            dis = np.array([v in dis_values for v in col], dtype=bool)
            dis_parts.append(dis)
            priv_parts.append(has & ~dis)
            present &= has
        dis = np.logical_and.reduce(dis_parts)
        if len(g.attributes) == 1 or intersectional_privileged == "complement":
            priv = present & ~dis
        else:
            priv = np.logical_and.reduce(priv_parts)
        masks[g.name] = (dis, priv)
    return Dataset(dataset.features, dataset.target, dataset.sensitive, masks)


def _floor_count(fraction: float, n: int) -> int:
    # 0.29 * 100 == 28.999999999999996
    return int(math.floor(fraction * n + 1e-9))


def split(dataset: Dataset | np.ndarray, seed: int) -> SplitSpec:
    """Stratified train/test split: 80/20 above 1000 rows, 70/30 otherwise."""
    target = dataset.target if isinstance(dataset, Dataset) else np.asarray(dataset)
    n = len(target)
    if n < 10:
        raise ValueError(f"need at least 10 rows to split, got {n}")
    test_fraction = 0.2 if n > 1000 else 0.3
    n_test = int(round(n * test_fraction))
    rng = np.random.default_rng(seed)

    classes = [np.flatnonzero(target == c) for c in (0, 1)]
    exact = [len(idx) * test_fraction for idx in classes]
    alloc = [int(math.floor(e)) for e in exact]
    order = sorted(range(2), key=lambda c: -(exact[c] - alloc[c]))
    for c in order[: n_test - sum(alloc)]:
        alloc[c] += 1

    test = []
    for idx, take in zip(classes, alloc):
        test.append(rng.permutation(idx)[:take])
    test_idx = np.sort(np.concatenate(test))
    train_mask = np.ones(n, dtype=bool)
    train_mask[test_idx] = False
    return SplitSpec(np.flatnonzero(train_mask), test_idx, seed)


def bootstrap_sample(train_indices: np.ndarray, fraction: float, seed: int, i: int) -> np.ndarray:
    """Draw ``floor(fraction * n)`` indices with replacement, keyed on ``(seed, i)``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    train_indices = np.asarray(train_indices)
    rng = np.random.default_rng([seed, i])
    pos = rng.integers(0, len(train_indices), size=_floor_count(fraction, len(train_indices)))
    return train_indices[pos]


def group_stats(dataset: Dataset) -> dict[str, dict[str, float]]:
    """Proportion and base rate overall and for each side of every group."""
    n = dataset.n_rows
    y = dataset.target
    stats = {"overall": {"proportion": 1.0, "base_rate": float(y.mean()) if n else math.nan}}
    for name, (dis, priv) in dataset.group_masks.items():
        for side, mask in (("priv", priv), ("dis", dis)):
            count = int(mask.sum())
            stats[f"{name}_{side}"] = {
                "proportion": count / n if n else 0.0,
                "base_rate": float(y[mask].mean()) if count else math.nan,
            }
    return stats
