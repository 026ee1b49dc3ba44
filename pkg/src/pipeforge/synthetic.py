"""Synthetic tabular data with an injected selection-rate gap between two groups."""
from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np
from scipy.stats import norm

HEADER = ("group", "merit", "proxy", "noise", "region", "label")


def make_biased_rows(n: int = 2000, gap: float = 0.3, seed: int = 0, privileged_share: float = 0.6,
                     privileged_rate: float = 0.5, missing_rate: float = 0.02) -> list[tuple]:
    """Rows whose label positive rate is ``privileged_rate`` for group "1" and
    ``privileged_rate - gap`` for group "2".

    ``merit`` carries the label signal and has the same distribution in both
    groups. ``proxy`` is shifted by group, so a model can recover the group
    from it. ``region`` is a categorical column loosely tied to the group.
    A small share of feature cells is left empty.
    """
    if not 0.0 < privileged_rate - gap < 1.0:
        raise ValueError("gap leaves an empty disadvantaged positive rate")
    rng = np.random.default_rng(seed)
    priv = rng.random(n) < privileged_share
    merit = rng.standard_normal(n)
    scale = np.sqrt(1.0 + 0.5 ** 2)
    score = merit + 0.5 * rng.standard_normal(n)
    threshold = np.where(priv, norm.ppf(1.0 - privileged_rate), norm.ppf(1.0 - (privileged_rate - gap))) * scale
    label = (score > threshold).astype(int)
    proxy = 1.5 * priv + rng.standard_normal(n)
    noise = rng.standard_normal(n)
    region = np.where(rng.random(n) < np.where(priv, 0.7, 0.3), "north", "south")
    region = np.where(rng.random(n) < 0.2, "east", region)

    rows = []
    for i in range(n):
        cells = [f"{merit[i]:.6f}", f"{proxy[i]:.6f}", f"{noise[i]:.6f}", str(region[i])]
        for j in range(len(cells)):
            if rng.random() < missing_rate:
                cells[j] = ""
        rows.append(("1" if priv[i] else "2", *cells, str(label[i])))
    return rows


def write_biased_csv(path: str | os.PathLike, **kwargs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADER)
        writer.writerows(make_biased_rows(**kwargs))
    return path


def main(argv: list[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="Write a synthetic CSV with a selection-rate gap between groups.")
    parser.add_argument("out")
    parser.add_argument("--rows", type=int, default=2000)
    parser.add_argument("--gap", type=float, default=0.3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    write_biased_csv(args.out, n=args.rows, gap=args.gap, seed=args.seed)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
