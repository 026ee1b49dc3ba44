"""Fairness-aware pipeline search: bandit selection over logical pipelines with per-pipeline
multi-objective Bayesian optimisation and incremental training with early halting."""

__version__ = "0.1.0"
