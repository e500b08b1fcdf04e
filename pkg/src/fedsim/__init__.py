"""Deterministic federated-learning simulator with goal/path-synergy
training, classical baselines, and a robustness-evaluation harness."""

from . import algorithms, data, diag, eval, nn, protocol, runner  # noqa: F401

__version__ = "0.1.0"
