"""Extrapolate neural-network weights to out-of-distribution targets.

A trained parent network is fine-tuned towards individual training samples,
each of its parameters is regressed on predictors of those samples, and the
regressions are evaluated at target predictors to build per-target children.
"""
__version__ = "0.1.0"
