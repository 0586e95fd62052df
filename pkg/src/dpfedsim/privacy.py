"""Calibrated Gaussian local DP: clipping, noise, and a privacy ledger.

The noise multiplier follows the minimal-noise convention
sigma = sqrt(2 ln(1.25/delta)) * sensitivity / epsilon, and sensitivity
always equals the clipping threshold. The ledger composes per-episode
leakage as cumulative = 1 - prod(1 - delta_t) and signals stop once the
configured threshold is exceeded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelUpdate


def calibrate_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """Noise multiplier for the Gaussian mechanism at (epsilon, delta)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if delta >= 1.25:
        raise ValueError("delta must be below 1.25 for the Gaussian calibration")
    if delta <= 0:
        raise ValueError("delta must be positive")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * sensitivity / epsilon


@dataclass(frozen=True)
class PrivacySpec:
    """Privacy parameters; sigma is derived, sensitivity equals the clip."""

    epsilon: float
    delta: float = 0.001
    clip_c: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if self.clip_c <= 0:
            raise ValueError("clip threshold must be positive")

    @property
    def sensitivity(self) -> float:
        return self.clip_c

    @property
    def sigma(self) -> float:
        return calibrate_sigma(self.epsilon, self.delta, self.sensitivity)

    @property
    def noise_std(self) -> float:
        """Per-coordinate standard deviation of the mechanism's noise."""
        return self.sensitivity * self.sigma


def clip(update: ModelUpdate, clip_c: float) -> ModelUpdate:
    """Scale the update to l2-norm at most clip_c: delta / max(1, |delta|/C)."""
    if clip_c <= 0:
        raise ValueError("clip threshold must be positive")
    norm = float(np.linalg.norm(update.delta))
    scale = max(1.0, norm / clip_c)
    return ModelUpdate(delta=update.delta / scale, node_id=update.node_id, episode=update.episode)


def add_noise(clipped: ModelUpdate, spec: PrivacySpec, rng: np.random.Generator) -> ModelUpdate:
    """Add i.i.d. Gaussian noise, std = sensitivity * sigma, per coordinate."""
    noise = spec.noise_std * rng.standard_normal(clipped.delta.shape)
    return ModelUpdate(delta=clipped.delta + noise, node_id=clipped.node_id, episode=clipped.episode)


@dataclass
class PrivacyLedger:
    """Cumulative leakage tracker with a stop threshold.

    Composition is the basic independent rule: after episodes with
    per-episode leakage d_t, cumulative = 1 - prod(1 - d_t). Stop is
    signaled strictly above the threshold.
    """

    stop_threshold: float = 0.01
    per_episode_delta: list = field(default_factory=list)
    cumulative_delta: float = 0.0

    @property
    def stopped(self) -> bool:
        return self.cumulative_delta > self.stop_threshold

    def account(self, spec: PrivacySpec) -> str:
        """Record one episode's leakage; returns "continue" or "stop"."""
        self.per_episode_delta.append(spec.delta)
        # 1 - prod(1 - d) composed incrementally as c + d - c*d, which is
        # exact at c = 0 so the strict stop boundary behaves
        c, d = self.cumulative_delta, spec.delta
        self.cumulative_delta = c + d - c * d
        return "stop" if self.stopped else "continue"


def account(ledger: PrivacyLedger, spec: PrivacySpec) -> str:
    return ledger.account(spec)
