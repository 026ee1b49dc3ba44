"""Logical-pipeline statistics, the risk-adjusted score and next-pipeline selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SCORE_FLOOR = 1e-6


class AllExhausted(RuntimeError):
    pass


@dataclass
class LpStats:
    """Running per-objective quality statistics for one logical pipeline.

    Quality is ``1 - loss``. Means and population standard deviations are
    maintained with Welford's update; cost is the running mean task cost.
    """

    n_objectives: int
    count: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)
    cost: float = 0.0
    score: float = math.nan

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.n_objectives)
        if self.m2 is None:
            self.m2 = np.zeros(self.n_objectives)

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(self.n_objectives)
        return np.sqrt(np.maximum(self.m2 / self.count, 0.0))

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist(),
                "cost": self.cost, "score": None if math.isnan(self.score) else self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "LpStats":
        mean = np.asarray(d["mean"], dtype=float)
        score = d.get("score")
        return cls(len(mean), int(d["count"]), mean, np.asarray(d["m2"], dtype=float), float(d["cost"]),
                   math.nan if score is None else float(score))


def score(mean_quality: Sequence[float], std_quality: Sequence[float], cost: float, weights: Sequence[float],
          risk_factor: float) -> float:
    """``sum(w * mu) + (risk_factor / cost) * sum(w * delta)``."""
    # plain left-to-right sums: the result does not depend on how a BLAS dot orders its additions
    exploit = 0.0
    spread = 0.0
    for w, mu, delta in zip(weights, mean_quality, std_quality, strict=True):
        exploit += float(w) * float(mu)
        spread += float(w) * float(delta)
    if spread == 0.0 or risk_factor == 0.0:
        return exploit
    return exploit + (risk_factor / cost) * spread


def update_stats(stats: LpStats, losses: Sequence[float], cost: float, weights: Sequence[float],
                 risk_factor: float) -> LpStats:
    """Fold one observation into ``stats`` in place and recompute the score."""
    quality = 1.0 - np.asarray(losses, dtype=float)
    if quality.shape != (stats.n_objectives,):
        raise ValueError(f"expected {stats.n_objectives} losses, got {quality.shape}")
    stats.count += 1
    delta = quality - stats.mean
    stats.mean = stats.mean + delta / stats.count
    stats.m2 = stats.m2 + delta * (quality - stats.mean)
    stats.cost += (float(cost) - stats.cost) / stats.count
    # A zero cost would make the spread term blow up; clamp to a tiny positive value.
    stats.cost = max(stats.cost, 1e-9)
    stats.score = score(stats.mean, stats.std, stats.cost, weights, risk_factor)
    return stats


def next_logical_pipeline(candidates: Iterable[tuple[str, LpStats, str]], exploration_factor: float,
                          rng: np.random.Generator) -> str:
    """Pick the next logical pipeline id.

    ``candidates`` yields ``(lp_id, stats, status)`` in a stable order, with
    status one of ``unseen``, ``active`` or ``exhausted``. With probability
    ``exploration_factor`` an LP with history is drawn proportionally to
    ``max(score, 1e-6)``; otherwise a uniformly random unseen LP is drawn.
    An empty branch falls through to the other one. Active LPs whose tasks
    have not come back yet belong to neither branch; they are drawn
    uniformly only when both branches are empty.
    """
    seen, unseen, pending = [], [], []
    for lp_id, stats, status in candidates:
        if status == "exhausted":
            continue
        if stats.count > 0:
            seen.append((lp_id, stats.score))
        elif status == "unseen":
            unseen.append(lp_id)
        else:
            pending.append(lp_id)
    if not seen and not unseen and not pending:
        raise AllExhausted("every logical pipeline is exhausted")

    exploit = rng.random() < exploration_factor
    if exploit and not seen:
        exploit = False
    elif not exploit and not unseen:
        exploit = bool(seen)
    if exploit:
        weights = np.array([max(s, SCORE_FLOOR) for _, s in seen])
        idx = rng.choice(len(seen), p=weights / weights.sum())
        return seen[int(idx)][0]
    if unseen:
        return unseen[int(rng.integers(len(unseen)))]
    return pending[int(rng.integers(len(pending)))]
