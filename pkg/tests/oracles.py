"""Independent reference implementations used as test oracles.

Everything here is written with plain loops so that it shares no code
path with the package under test.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate, stats


def confusion_loop(y, yhat, mask=None):
    tp = fp = tn = fn = 0
    for i in range(len(y)):
        if mask is not None and not mask[i]:
            continue
        if y[i] and yhat[i]:
            tp += 1
        elif not y[i] and yhat[i]:
            fp += 1
        elif not y[i] and not yhat[i]:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def f1_loop(tp, fp, fn):
    if 2 * tp + fp + fn == 0:
        return 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def rates_loop(tp, fp, tn, fn):
    """TPR, TNR, FNR and selection rate, each None when its denominator is 0."""
    pos, neg, n = tp + fn, tn + fp, tp + fp + tn + fn
    return {
        "TPRD": tp / pos if pos else None,
        "TNRD": tn / neg if neg else None,
        "FNRD": fn / pos if pos else None,
        "SRD": (tp + fp) / n if n else None,
    }


def disparities_loop(y, yhat, dis, priv):
    rd = rates_loop(*confusion_loop(y, yhat, dis))
    rp = rates_loop(*confusion_loop(y, yhat, priv))
    return {k: (None if rd[k] is None or rp[k] is None else rd[k] - rp[k]) for k in rd}


def pareto_loop(points):
    """Indices of points no other point dominates (duplicates all kept)."""
    keep = []
    for i, p in enumerate(points):
        dominated = False
        for j, q in enumerate(points):
            if j != i and all(a <= b for a, b in zip(q, p)) and any(a < b for a, b in zip(q, p)):
                dominated = True
                break
        if not dominated:
            keep.append(i)
    return keep


def hypervolume_grid(front, ref, cells=2000):
    """Midpoint-rule integration of the dominated region of a 2-D front."""
    front = np.asarray(front, dtype=float)
    xs = (np.arange(cells) + 0.5) / cells
    lo = front.min(axis=0)
    gx = lo[0] + xs * (ref[0] - lo[0])
    gy = lo[1] + xs * (ref[1] - lo[1])
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    covered = np.zeros(X.shape, dtype=bool)
    for p in front:
        covered |= (X >= p[0]) & (Y >= p[1])
    return covered.mean() * (ref[0] - lo[0]) * (ref[1] - lo[1])


def expected_improvement_quad(mean, std, best):
    """E[max(best - Y, 0)] for Y ~ N(mean, std) by numerical integration."""
    if std < 1e-9:
        # EI differs from the plain improvement by at most std * pdf(0) < 4e-10
        return max(best - mean, 0.0)
    lo, hi = mean - 12 * std, min(best, mean + 12 * std)
    if hi <= lo:
        return 0.0
    value, _ = integrate.quad(lambda y: (best - y) * stats.norm.pdf(y, mean, std), lo, hi, epsabs=1e-12)
    # the far tail above mean + 12 std contributes nothing measurable; below lo the
    # integrand is (best - y) times a density that is negligible
    return value


def score_direct(weights, means, stds, risk, cost):
    total_mean = 0.0
    total_std = 0.0
    for w, m, s in zip(weights, means, stds):
        total_mean += w * m
        total_std += w * s
    return total_mean + (risk / cost) * total_std


def hypervolume_inclusion_exclusion(front, ref):
    """Union volume of the boxes [p, ref] by inclusion-exclusion (small fronts only)."""
    front = [np.asarray(p, dtype=float) for p in front]
    ref = np.asarray(ref, dtype=float)
    total = 0.0
    n = len(front)
    for mask in range(1, 2 ** n):
        members = [front[i] for i in range(n) if mask >> i & 1]
        corner = np.max(members, axis=0)
        total += (-1) ** (len(members) + 1) * float(np.prod(np.clip(ref - corner, 0.0, None)))
    return total
