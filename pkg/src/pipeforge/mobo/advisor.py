"""Per-logical-pipeline Bayesian advisor producing batches of hyperparameter suggestions."""
from __future__ import annotations

import itertools
import math
import warnings
import zlib
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy.stats import qmc

from pipeforge.learners import CategoricalDomain, IntDomain
from pipeforge.mobo.pareto import ParetoFront, ehvi, expected_improvement, pareto_filter
from pipeforge.mobo.surrogate import Encoder, GaussianSurrogate
from pipeforge.searchspace import LogicalPipeline, assignment_key

WARM_START = 8
N_ACQ_SAMPLES = 1024
EHVI_MC_SAMPLES = 64
ACQUISITIONS = ("ehvi", "weighted_scalar")


class DomainExhausted(RuntimeError):
    pass


class DuplicateAssignment(UserWarning):
    pass


@dataclass
class Suggestion:
    assignment: dict[str, Any]
    origin: str  # "bo_suggested" or "random_candidate"


def n_bo_slots(k: int) -> int:
    """Model-based share of a batch of ``k``: three quarters, at least one."""
    return max(1, k - math.ceil(k / 4))


class Advisor:
    """Archive, surrogates and suggestion logic for one logical pipeline.

    Losses are multiplied by the objective weights before they reach the
    surrogate or the acquisition; ``ref_point`` lives in that scaled space.
    Randomness is derived from ``(seed, lp id, suggestions so far)``, so an
    advisor rebuilt from its history continues exactly where it stopped.
    """

    def __init__(self, lp: LogicalPipeline, weights: Sequence[float], ref_point: Sequence[float], seed: int,
                 acquisition: str = "ehvi", warm_start: int = WARM_START, n_samples: int = N_ACQ_SAMPLES,
                 mc_samples: int = EHVI_MC_SAMPLES):
        if acquisition not in ACQUISITIONS:
            raise ValueError(f"unknown acquisition {acquisition!r}")
        self.lp = lp
        self.weights = np.asarray(weights, dtype=float)
        self.ref_point = np.asarray(ref_point, dtype=float)
        self.seed = seed
        self.acquisition = acquisition
        self.warm_start = warm_start
        self.n_samples = n_samples
        self.mc_samples = mc_samples
        self.encoder = Encoder(lp.domain)
        self.archive: list[tuple[dict[str, Any], np.ndarray]] = []
        self._archived: set[str] = set()
        self._suggested: set[str] = set()
        self.n_suggested = 0
        self._surrogate: GaussianSurrogate | None = None
        self._stale = True
        self._lp_key = zlib.crc32(lp.id.encode())

    # -- bookkeeping -------------------------------------------------------

    @property
    def stale(self) -> bool:
        return self._stale

    @property
    def domain_size(self) -> int | None:
        return self.lp.domain_size()

    def exhausted(self) -> bool:
        size = self.domain_size
        return size is not None and len(self._suggested) >= size

    def mark_suggested(self, assignment: dict[str, Any]) -> None:
        """Record an assignment issued elsewhere (used when rebuilding from a store)."""
        self._suggested.add(assignment_key(assignment))
        self.n_suggested += 1

    def observe(self, assignment: dict[str, Any], losses: Sequence[float]) -> bool:
        """Add one observation; a repeated assignment is ignored with a warning."""
        losses = np.asarray(losses, dtype=float)
        if losses.shape != self.weights.shape:
            raise ValueError(f"expected {len(self.weights)} losses, got {losses.shape}")
        if not np.all(np.isfinite(losses)) or np.any(losses < 0) or np.any(losses > 1):
            raise ValueError("losses must lie in [0, 1]")
        key = assignment_key(assignment)
        if key in self._archived:
            warnings.warn(f"duplicate assignment for {self.lp.id} ignored", DuplicateAssignment, stacklevel=2)
            return False
        self._archived.add(key)
        self._suggested.add(key)
        self.archive.append((dict(assignment), losses))
        self._stale = True
        return True

    def losses(self) -> np.ndarray:
        if not self.archive:
            return np.zeros((0, len(self.weights)))
        return np.vstack([l for _, l in self.archive])

    def front(self) -> ParetoFront:
        """Pareto front of raw (unweighted) archived losses."""
        return pareto_filter(self.losses(), self.ref_point / np.where(self.weights > 0, self.weights, 1.0))

    # -- suggestions -------------------------------------------------------

    def _rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, self._lp_key, self.n_suggested])

    def _random_assignment(self, rng: np.random.Generator, taken: set[str]) -> dict[str, Any] | None:
        for _ in range(64):
            a = self.encoder.from_unit(rng.random(self.encoder.n_dims))
            if assignment_key(a) not in taken:
                return a
        size = self.domain_size
        if size is None or size > 100_000:
            return None
        # small finite domain: choose uniformly among what is left
        left = [a for a in self._enumerate() if assignment_key(a) not in taken]
        if not left:
            return None
        return left[int(rng.integers(len(left)))]

    def _enumerate(self) -> list[dict[str, Any]]:
        names, doms = self.encoder.names, self.encoder.domains
        values = [d.values() for d in doms if isinstance(d, (IntDomain, CategoricalDomain))]
        return [dict(zip(names, combo)) for combo in itertools.product(*values)]

    def _scaled(self) -> np.ndarray:
        return self.losses() * self.weights

    def _acquisition_values(self, candidates: list[dict[str, Any]]) -> np.ndarray:
        X = np.vstack([self.encoder.features(a) for a in candidates]) if self.encoder.n_features else \
            np.zeros((len(candidates), 0))
        train_X = np.vstack([self.encoder.features(a) for a, _ in self.archive]) if self.encoder.n_features else \
            np.zeros((len(self.archive), 0))
        scaled = self._scaled()
        if self.acquisition == "weighted_scalar":
            target = scaled.sum(axis=1, keepdims=True)
        else:
            target = scaled
        if self._stale or self._surrogate is None:
            self._surrogate = GaussianSurrogate(self.encoder.n_features, seed=self.seed).fit(train_X, target)
            self._stale = False
        mean, std = self._surrogate.predict(X)
        if target.shape[1] == 1:
            bound = float(self.ref_point.sum()) if self.acquisition == "weighted_scalar" else float(self.ref_point[0])
            best = min(bound, float(target.min()))
            return expected_improvement(mean[:, 0], std[:, 0], best)
        inside = scaled[np.all(scaled <= self.ref_point, axis=1)]
        return ehvi(mean, std, inside, self.ref_point, mc_samples=self.mc_samples,
                    seed=self.seed + self.n_suggested)

    def suggest(self, k: int) -> list[Suggestion]:
        """Return up to ``k`` fresh assignments; fewer only when a finite domain runs out."""
        if k < 1:
            raise ValueError("k must be at least 1")
        if self.exhausted():
            raise DomainExhausted(self.lp.id)
        rng = self._rng()
        taken = set(self._suggested)
        out: list[Suggestion] = []

        use_model = self.n_suggested >= self.warm_start and len(self.archive) >= 2 and self.encoder.n_dims > 0
        n_model = n_bo_slots(k) if use_model else 0
        if n_model:
            sampler = qmc.Sobol(d=self.encoder.n_dims, scramble=True, seed=rng)
            units = sampler.random(self.n_samples)
            candidates, seen = [], set()
            for u in units:
                a = self.encoder.from_unit(u)
                key = assignment_key(a)
                if key in taken or key in seen:
                    continue
                seen.add(key)
                candidates.append(a)
            if candidates:
                acq = self._acquisition_values(candidates)
                # stable sort: ties keep the lowest sample index
                for i in np.argsort(-acq, kind="stable")[:n_model]:
                    out.append(Suggestion(candidates[int(i)], "bo_suggested"))
                    taken.add(assignment_key(candidates[int(i)]))
        while len(out) < k:
            a = self._random_assignment(rng, taken)
            if a is None:
                break
            taken.add(assignment_key(a))
            out.append(Suggestion(a, "random_candidate"))
        if not out:
            raise DomainExhausted(self.lp.id)
        for s in out:
            self._suggested.add(assignment_key(s.assignment))
        self.n_suggested += len(out)
        return out
