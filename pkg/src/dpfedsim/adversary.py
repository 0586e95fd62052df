"""DP-exploiting model poisoning: adaptive mean-shifted noise and baselines.

The attacker replaces the benign DP noise on compromised updates with
draws from a Gaussian whose mean is shifted by sqrt(2*gamma)*sigma_x,
where gamma is the degree of poisoning and sigma_x matches the benign
noise standard deviation. An adaptive controller tunes gamma every
episode from the ratio of the current compromised validation loss to the
historical mean. A random-update baseline (rmd) submits a uniformly
random vector scaled to the clipping threshold instead of a trained
update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import NodeShard
from .model import Architecture, ModelUpdate, mse_loss
from .privacy import PrivacySpec


@dataclass(frozen=True)
class AttackConfig:
    compromised: frozenset[int] = frozenset()
    theta: float = 0.0
    rho: float = 0.1
    gamma0: float = 1.0  # callers default this to epsilon
    r_hi: float = 1.5
    r_lo: float = 0.5
    stop_fraction: float = 1.0
    gamma_fixed: Optional[float] = None  # set to disable adaptation

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if not self.r_lo < 1.0 < self.r_hi:
            raise ValueError("loss-ratio thresholds must straddle 1")
        if self.gamma0 < 0:
            raise ValueError("initial degree of poisoning must be >= 0")
        if not 0.0 <= self.stop_fraction <= 1.0:
            raise ValueError("stop_fraction must be in [0, 1]")

    @property
    def m(self) -> int:
        return len(self.compromised)


@dataclass(frozen=True)
class AttackState:
    """Controller memory: loss history and the current degree of poisoning."""

    episodic_losses: tuple[float, ...] = ()
    gamma_current: float = 1.0
    gamma_episode: float = 1.0
    loss_ratio: float = 0.0

    @classmethod
    def initial(cls, gamma0: float) -> "AttackState":
        return cls(episodic_losses=(), gamma_current=gamma0,
                   gamma_episode=gamma0, loss_ratio=0.0)


@dataclass(frozen=True)
class PoisonWindow:
    """Analytical noise-injection slack around a detector threshold.

    Intervals are (0, endpoint) tuples, or None when the endpoint is
    negative (empty window). Reporting aid only; the attack loop never
    consults it because the attacker cannot observe the threshold.
    """

    tau: float
    upsilon: float
    lower: Optional[tuple[float, float]]
    upper: Optional[tuple[float, float]]
    eta_max: Optional[float] = None


def poisoning_window(tau: float, upsilon: float, eta_max: Optional[float] = None) -> PoisonWindow:
    """Windows [0, tau - upsilon] and [0, tau + upsilon] opened by DP slack."""
    if tau < 0:
        raise ValueError("detection threshold must be >= 0")

    def interval(endpoint: float):
        return None if endpoint < 0 else (0.0, endpoint)

    return PoisonWindow(
        tau=tau,
        upsilon=upsilon,
        lower=interval(tau - upsilon),
        upper=interval(tau + upsilon),
        eta_max=eta_max,
    )


def adversarial_mu(theta: float, gamma: float, sigma_x: float) -> float:
    """Optimal mean shift of the attack distribution: theta + sqrt(2*gamma)*sigma_x."""
    if gamma < 0:
        raise ValueError("degree of poisoning must be >= 0")
    if sigma_x < 0:
        raise ValueError("sigma_x must be >= 0")
    return theta + math.sqrt(2.0 * gamma) * sigma_x


def inject(
    clipped: ModelUpdate,
    spec: PrivacySpec,
    cfg: AttackConfig,
    gamma_episode: float,
    rng: np.random.Generator,
) -> ModelUpdate:
    """Replace benign DP noise with the adversarial draw.

    Each coordinate receives i.i.d. noise with mean adversarial_mu(theta,
    gamma, sigma_x) and the benign standard deviation, where sigma_x is
    also the benign standard deviation. With gamma 0 and theta 0 the draw
    is bit-identical to the benign mechanism on the same substream.
    """
    mu = adversarial_mu(cfg.theta, gamma_episode, spec.noise_std)
    noise = mu + spec.noise_std * rng.standard_normal(clipped.delta.shape)
    return ModelUpdate(delta=clipped.delta + noise, node_id=clipped.node_id, episode=clipped.episode)


def episodic_loss(
    arch: Architecture,
    global_params: np.ndarray,
    shards: Sequence[NodeShard],
) -> float:
    """Average validation loss of the received global model over the
    compromised nodes' validation sets."""
    if not shards:
        raise ValueError("no compromised shards to evaluate")
    losses = [mse_loss(arch, global_params, s.validation_xy) for s in shards]
    return float(np.mean(losses))


def tune_poison_degree(state: AttackState, current_loss: float, cfg: AttackConfig) -> AttackState:
    """One controller step: memorize the episode loss and retune gamma.

    The loss ratio compares the current loss to the mean of all previous
    episodes' losses. Well above 1 the attack pauses (gamma_episode 0,
    last nonzero gamma retained); well below 1 it is amplified in
    proportion to the ratio; near 1 it is damped the same way. Before any
    history exists the initial gamma is used unchanged.
    """
    history = state.episodic_losses
    if not history:
        ratio = 0.0
        gamma_episode = state.gamma_current
    else:
        hist_mean = float(np.mean(history))
        # zero historical mean leaves the ratio undefined; fall through
        # to the damping branch at ratio 1
        ratio = current_loss / hist_mean if hist_mean != 0.0 else 1.0
        gamma = state.gamma_current
        if ratio > cfg.r_hi:
            gamma_episode = 0.0
        elif ratio < cfg.r_lo:
            gamma_episode = gamma + cfg.rho * ratio * gamma
        else:
            gamma_episode = max(0.0, gamma - cfg.rho * ratio * gamma)

    return AttackState(
        episodic_losses=history + (current_loss,),
        gamma_current=gamma_episode if gamma_episode != 0.0 else state.gamma_current,
        gamma_episode=gamma_episode,
        loss_ratio=ratio,
    )


def mpelm_step(
    state: AttackState,
    arch: Architecture,
    global_params: np.ndarray,
    shards: Sequence[NodeShard],
    cfg: AttackConfig,
) -> AttackState:
    """Full adaptive step: measure compromised validation loss, then retune."""
    return tune_poison_degree(state, episodic_loss(arch, global_params, shards), cfg)


def stopped_nodes(active: Sequence[int], cfg: AttackConfig) -> frozenset[int]:
    """Subset of active compromised nodes that pause when the controller
    signals a stop; the first round(stop_fraction * count) in id order."""
    ordered = sorted(active)
    n_stop = round(cfg.stop_fraction * len(ordered))
    return frozenset(ordered[:n_stop])


def rmd_update(
    spec: PrivacySpec,
    rng: np.random.Generator,
    n_params: int,
    node_id: int = -1,
    episode: int = 0,
) -> ModelUpdate:
    """Random-update baseline: a uniform direction scaled to the clipping
    threshold, submitted with benign DP noise on top."""
    direction = rng.uniform(-1.0, 1.0, size=n_params)
    norm = float(np.linalg.norm(direction))
    while norm == 0.0:  # measure-zero, but keep the draw well-defined
        direction = rng.uniform(-1.0, 1.0, size=n_params)
        norm = float(np.linalg.norm(direction))
    delta = direction * (spec.clip_c / norm)
    noisy = delta + spec.noise_std * rng.standard_normal(n_params)
    return ModelUpdate(delta=noisy, node_id=node_id, episode=episode)
