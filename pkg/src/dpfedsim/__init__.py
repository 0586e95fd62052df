"""Deterministic simulator for locally differentially private federated
learning, its DP-exploiting adaptive poisoning attack, the anomaly
detectors it targets, and a Q-learning privacy-level selection defense."""

__version__ = "0.1.0"
