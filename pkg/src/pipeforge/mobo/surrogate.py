"""Hyperparameter encoding and per-objective Gaussian-process surrogates."""
from __future__ import annotations

import warnings
from typing import Any, Mapping

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel, WhiteKernel

from pipeforge.learners import CategoricalDomain, Domain

NOISE_FLOOR = 1e-6


class Encoder:
    """Maps assignments to and from the unit cube.

    ``from_unit`` takes one coordinate per domain dimension (the sampling
    space). ``features`` produces the surrogate's input: the unit coordinate
    for numeric dimensions and a one-hot block for categorical ones.
    """

    def __init__(self, domain: Mapping[str, Domain]):
        self.names = sorted(domain)
        self.domains = [domain[n] for n in self.names]

    @property
    def n_dims(self) -> int:
        return len(self.names)

    @property
    def n_features(self) -> int:
        return sum(d.size if isinstance(d, CategoricalDomain) else 1 for d in self.domains)

    def from_unit(self, u: np.ndarray) -> dict[str, Any]:
        return {n: d.from_unit(float(x)) for n, d, x in zip(self.names, self.domains, u)}

    def features(self, assignment: Mapping[str, Any]) -> np.ndarray:
        out = []
        for n, d in zip(self.names, self.domains):
            v = assignment[n]
            if isinstance(d, CategoricalDomain):
                out.extend(1.0 if c == v else 0.0 for c in d.choices)
            else:
                out.append(d.to_unit(v))
        return np.asarray(out, dtype=float)


class GaussianSurrogate:
    """Independent GP per output column with a constant mean (normalised targets),
    an ARD squared-exponential kernel and a learned observation noise term."""

    def __init__(self, n_features: int, seed: int, n_restarts: int = 3):
        self.n_features = n_features
        self.seed = seed
        self.n_restarts = n_restarts
        self.models: list[GaussianProcessRegressor] = []

    def _kernel(self):
        dims = max(self.n_features, 1)
        return (ConstantKernel(1.0, (1e-3, 1e3))
                * RBF(length_scale=np.full(dims, 0.5), length_scale_bounds=(1e-2, 1e2))
                + WhiteKernel(1e-3, (NOISE_FLOOR, 1e-1)))

    def fit(self, X: np.ndarray, Y: np.ndarray) -> "GaussianSurrogate":
        X = np.asarray(X, dtype=float).reshape(len(Y), -1)
        if X.shape[1] == 0:
            X = np.zeros((len(Y), 1))
        Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
        self.models = []
        for j in range(Y.shape[1]):
            gp = GaussianProcessRegressor(self._kernel(), normalize_y=True, n_restarts_optimizer=self.n_restarts,
                                          random_state=self.seed + j)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                gp.fit(X, Y[:, j])
            self.models.append(gp)
        return self

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior means and standard deviations, each of shape (n, n_outputs)."""
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        if X.shape[1] == 0:
            X = np.zeros((len(X), 1))
        means, stds = [], []
        for gp in self.models:
            m, s = gp.predict(X, return_std=True)
            means.append(m)
            stds.append(s)
        return np.column_stack(means), np.column_stack(stds)

    def noise_std(self) -> np.ndarray:
        """Learned observation noise per output, in target units."""
        out = []
        for gp in self.models:
            level = gp.kernel_.k2.noise_level
            out.append(np.sqrt(level) * float(np.atleast_1d(gp._y_train_std)[0]))
        return np.asarray(out)
