"""Pareto filtering, hypervolume and expected hypervolume improvement (minimisation)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


class RefPointViolation(ValueError):
    """The reference point dominates a front member."""


@dataclass
class ParetoFront:
    points: np.ndarray
    ref_point: np.ndarray
    indices: np.ndarray

    @property
    def inside(self) -> np.ndarray:
        """Mask of members lying inside the reference box."""
        return np.all(self.points <= self.ref_point, axis=1)

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "ref_point": self.ref_point.tolist(),
                "indices": self.indices.tolist()}


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(a <= b) and np.any(a < b))


def pareto_mask(points: np.ndarray) -> np.ndarray:
    """Mask of rows not dominated by any other row. Exact duplicates are all kept."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    keep = np.ones(len(pts), dtype=bool)
    for start in range(0, len(pts), 512):
        block = pts[start:start + 512]
        le = np.all(pts[None, :, :] <= block[:, None, :], axis=2)
        lt = np.any(pts[None, :, :] < block[:, None, :], axis=2)
        keep[start:start + 512] = ~np.any(le & lt, axis=1)
    return keep


def pareto_filter(points: np.ndarray, ref_point: np.ndarray | None = None) -> ParetoFront:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0 and pts.ndim != 2:
        pts = pts.reshape(0, len(ref_point) if ref_point is not None else 0)
    mask = pareto_mask(pts)
    ref = np.ones(pts.shape[1]) if ref_point is None else np.asarray(ref_point, dtype=float)
    idx = np.flatnonzero(mask)
    return ParetoFront(pts[idx], ref, idx)


def _check_ref(front: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Raise if ``ref`` dominates a member; return members inside the box."""
    front = np.asarray(front, dtype=float).reshape(-1, len(ref))
    dominated_by_ref = np.all(ref <= front, axis=1) & np.any(ref < front, axis=1)
    if np.any(dominated_by_ref):
        raise RefPointViolation(f"reference point {ref.tolist()} dominates {front[dominated_by_ref][0].tolist()}")
    return front[np.all(front <= ref, axis=1)]


def hypervolume_2d(front: np.ndarray, ref_point: np.ndarray) -> float:
    """Exact area dominated by ``front`` inside the box below ``ref_point``."""
    ref = np.asarray(ref_point, dtype=float)
    if len(ref) != 2:
        raise ValueError("hypervolume_2d needs two objectives")
    pts = _check_ref(front, ref)
    if len(pts) == 0:
        return 0.0
    pts = pts[pareto_mask(pts)]
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    xs = np.append(pts[:, 0], ref[0])
    return float(np.sum((xs[1:] - xs[:-1]) * (ref[1] - pts[:, 1])))


def _columns(front: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split the box below ``ref`` into columns over the first d-1 axes.

    Returns lower corners, upper corners and the height (last-axis bound)
    below which a column is not dominated by ``front``. The lowest cell on
    each axis is open towards minus infinity.
    """
    d = len(ref)
    axes = []
    for j in range(d - 1):
        b = np.unique(np.append(front[:, j], ref[j]))
        axes.append((np.concatenate(([-np.inf], b[:-1])), b))
    lows = np.array(np.meshgrid(*[a[0] for a in axes], indexing="ij")).reshape(d - 1, -1).T
    highs = np.array(np.meshgrid(*[a[1] for a in axes], indexing="ij")).reshape(d - 1, -1).T
    height = np.full(len(lows), ref[-1])
    if len(front):
        covers = np.all(front[None, :, :d - 1] <= lows[:, None, :], axis=2)
        last = np.where(covers, front[None, :, d - 1], np.inf)
        height = np.minimum(height, last.min(axis=1))
    return lows, highs, height


def hypervolume_improvement(points: np.ndarray, front: np.ndarray, ref_point: np.ndarray,
                            chunk: int = 4096) -> np.ndarray:
    """Exact volume each row of ``points`` would add to ``front`` (each row on its own)."""
    ref = np.asarray(ref_point, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    front = np.asarray(front, dtype=float).reshape(-1, len(ref))
    front = front[np.all(front <= ref, axis=1)]
    if len(ref) == 1:
        bound = min(ref[0], front[:, 0].min()) if len(front) else ref[0]
        return np.maximum(bound - pts[:, 0], 0.0)
    lows, highs, height = _columns(front, ref)
    out = np.empty(len(pts))
    d = len(ref)
    for start in range(0, len(pts), chunk):
        y = pts[start:start + chunk]
        widths = np.clip(highs[None, :, :] - np.maximum(lows[None, :, :], y[:, None, :d - 1]), 0.0, None)
        base = np.prod(widths, axis=2)
        out[start:start + chunk] = np.sum(base * np.clip(height[None, :] - y[:, None, d - 1], 0.0, None), axis=1)
    return out


def hypervolume(front: np.ndarray, ref_point: np.ndarray) -> float:
    """Exact hypervolume in any dimension by summing successive improvements."""
    ref = np.asarray(ref_point, dtype=float)
    pts = _check_ref(front, ref)
    if len(pts) == 0:
        return 0.0
    pts = pts[pareto_mask(pts)]
    if len(ref) == 2:
        return hypervolume_2d(pts, ref)
    total = 0.0
    for i in range(len(pts)):
        total += float(hypervolume_improvement(pts[i:i + 1], pts[:i], ref)[0])
    return total


def hypervolume_mc(front: np.ndarray, ref_point: np.ndarray, samples: int = 1_000_000, seed: int = 0,
                   chunk: int = 100_000) -> float:
    """Monte Carlo hypervolume: dominated fraction of the box ``[min(front), ref]``."""
    ref = np.asarray(ref_point, dtype=float)
    pts = _check_ref(front, ref)
    if len(pts) == 0:
        return 0.0
    pts = pts[pareto_mask(pts)]
    lower = pts.min(axis=0)
    box = float(np.prod(ref - lower))
    if box == 0.0:
        return 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        s = lower + rng.random((n, len(ref))) * (ref - lower)
        hits += int(np.sum(np.any(np.all(pts[None, :, :] <= s[:, None, :], axis=2), axis=1)))
    return box * hits / samples


def expected_improvement(mean: np.ndarray, std: np.ndarray, best: float) -> np.ndarray:
    """Closed-form expected improvement below ``best`` for Gaussian posteriors."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    gap = best - mean
    out = np.maximum(gap, 0.0)
    pos = std > 0
    z = gap[pos] / std[pos]
    out[pos] = gap[pos] * norm.cdf(z) + std[pos] * norm.pdf(z)
    return out


def ehvi(means: np.ndarray, stds: np.ndarray, front: np.ndarray, ref_point: np.ndarray, mc_samples: int = 128,
         seed: int = 0) -> np.ndarray:
    """Monte Carlo expected hypervolume improvement for a batch of candidates.

    ``means`` and ``stds`` have shape (n_candidates, d) and describe
    independent Gaussian posteriors. Every candidate reuses the same standard
    normal draws, so results are deterministic per seed and comparable
    across candidates. A single candidate may be passed as a 1-D vector.
    """
    means = np.asarray(means, dtype=float)
    single = means.ndim == 1
    means = np.atleast_2d(means)
    stds = np.broadcast_to(np.atleast_2d(np.asarray(stds, dtype=float)), means.shape)
    z = np.random.default_rng(seed).standard_normal((mc_samples, means.shape[1]))
    out = np.empty(len(means))
    # keep each hypervolume_improvement call near a few million cell evaluations
    per = max(1, 4096 // mc_samples)
    for start in range(0, len(means), per):
        m = means[start:start + per]
        s = stds[start:start + per]
        y = (m[:, None, :] + s[:, None, :] * z[None, :, :]).reshape(-1, means.shape[1])
        hvi = hypervolume_improvement(y, front, ref_point).reshape(len(m), mc_samples)
        out[start:start + per] = hvi.mean(axis=1)
    return out[0] if single else out


def weighted_scalar_loss(losses, weights) -> float:
    return float(np.dot(np.asarray(weights, dtype=float), np.asarray(losses, dtype=float)))
