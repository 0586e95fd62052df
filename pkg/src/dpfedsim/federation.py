"""Episode orchestration: sampling, local training, noise, aggregation.

One episode selects n of the K nodes, trains them from the current
global model, clips and noises their updates (adversarially for
compromised nodes), optionally filters flagged updates, aggregates the
survivors by their mean, and evaluates the new global model on the union
of all nodes' validation splits.

Determinism contract: every random draw comes from a substream keyed by
(master seed, purpose, episode, node), and updates are combined in
ascending node-id order, so serial and parallel executions produce
bit-identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import adversary as adv
from . import detection as det
from .data import NodeShard, pooled_validation
from .model import Architecture, ModelUpdate, OptimizerConfig, init_params, local_train, mse_loss
from .privacy import PrivacyLedger, PrivacySpec, add_noise, clip
from .rng import substream, substream_seed


class EmptyAggregationError(RuntimeError):
    """Every submitted model was flagged; the episode cannot aggregate."""

    def __init__(self, episode: int):
        super().__init__(f"episode {episode}: all submitted models flagged, empty aggregation")
        self.episode = episode


@dataclass(frozen=True)
class FederationConfig:
    k: int = 100
    n: int = 30
    episodes: int = 30
    seed: int = 0
    privacy: PrivacySpec = field(default_factory=lambda: PrivacySpec(epsilon=0.7))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stop_threshold: float = 0.01
    workers: int = 0

    def __post_init__(self):
        if not 1 <= self.n <= self.k:
            raise ValueError("need 1 <= participants <= total nodes")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


@dataclass(frozen=True)
class RoundRecord:
    episode: int
    selected: tuple[int, ...]
    submitted: tuple[ModelUpdate, ...]
    flagged: frozenset[int]
    global_params_after: np.ndarray
    global_val_loss: float
    delta_cumulative: float
    # diagnostics, not part of the aggregation contract
    verdicts: tuple = ()
    active_compromised: tuple[int, ...] = ()
    gamma_episode: Optional[float] = None

    def same_outcome(self, other: "RoundRecord") -> bool:
        """Bitwise equality of the federation-visible fields."""
        return (
            self.episode == other.episode
            and self.selected == other.selected
            and self.flagged == other.flagged
            and len(self.submitted) == len(other.submitted)
            and all(
                a.node_id == b.node_id and np.array_equal(a.delta, b.delta)
                for a, b in zip(self.submitted, other.submitted)
            )
            and np.array_equal(self.global_params_after, other.global_params_after)
            and self.global_val_loss == other.global_val_loss
            and self.delta_cumulative == other.delta_cumulative
        )


@dataclass
class FederationState:
    """Everything the orchestrator owns across episodes (single writer)."""

    arch: Architecture
    shards: list[NodeShard]
    global_params: np.ndarray
    ledger: PrivacyLedger
    server_validation: Optional[tuple[np.ndarray, np.ndarray]] = None
    episode: int = 0
    attack_state: Optional[adv.AttackState] = None

    @classmethod
    def create(
        cls,
        cfg: FederationConfig,
        shards: Sequence[NodeShard],
        arch: Architecture = None,
        server_validation=None,
    ) -> "FederationState":
        arch = arch or Architecture()
        params = init_params(arch, substream(cfg.seed, "init"))
        return cls(
            arch=arch,
            shards=list(shards),
            global_params=params,
            ledger=PrivacyLedger(stop_threshold=cfg.stop_threshold),
            server_validation=server_validation,
        )

    def global_validation_loss(self) -> float:
        return mse_loss(self.arch, self.global_params, pooled_validation(self.shards))


def select_nodes(k: int, n: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample of n node ids without replacement, sorted ascending."""
    if n > k:
        raise ValueError(f"cannot select {n} of {k} nodes")
    chosen = rng.choice(k, size=n, replace=False)
    return sorted(int(c) for c in chosen)


def aggregate(global_params: np.ndarray, updates: Sequence[ModelUpdate]) -> np.ndarray:
    """New global model: old params plus the mean of the updates.

    Summation runs in ascending node-id order for bit-reproducibility.
    """
    if not updates:
        raise ValueError("cannot aggregate an empty update set")
    q = global_params.shape[0]
    total = np.zeros(q)
    for update in sorted(updates, key=lambda u: u.node_id):
        if update.delta.shape != (q,):
            raise ValueError(
                f"update from node {update.node_id} has length {update.delta.shape}, expected {q}"
            )
        total += update.delta
    return global_params + total / len(updates)


def _node_update(
    state: FederationState,
    cfg: FederationConfig,
    node_id: int,
    attacker: Optional["Attacker"],
    node_gamma: dict[int, float],
) -> ModelUpdate:
    """Train, clip, and noise one node's submission for the current episode."""
    t = state.episode
    compromised = attacker is not None and node_id in attacker.config.compromised

    if compromised and attacker.kind == "rmd":
        return adv.rmd_update(
            cfg.privacy,
            substream(cfg.seed, "rmd", t, node_id),
            state.arch.n_params,
            node_id=node_id,
            episode=t,
        )

    raw = local_train(
        state.arch,
        state.global_params,
        state.shards[node_id],
        cfg.optimizer,
        substream_seed(cfg.seed, "train", t, node_id),
        node_id=node_id,
        episode=t,
    )
    clipped = clip(raw, cfg.privacy.clip_c)
    noise_rng = substream(cfg.seed, "noise", t, node_id)
    if compromised:
        return adv.inject(clipped, cfg.privacy, attacker.config, node_gamma[node_id], noise_rng)
    return add_noise(clipped, cfg.privacy, noise_rng)


def run_episode(
    state: FederationState,
    cfg: FederationConfig,
    attacker: Optional["Attacker"] = None,
    detector: Optional[det.DetectorConfig] = None,
) -> RoundRecord:
    """Execute one full federation episode and advance the state."""
    if state.ledger.stopped:
        raise RuntimeError("privacy ledger exhausted; cannot run another episode")
    if detector is not None and detector.kind in ("accuracy", "mix") and state.server_validation is None:
        raise ValueError(f"{detector.kind} detection requires a server validation set")
    state.episode += 1
    t = state.episode

    selected = select_nodes(cfg.k, cfg.n, substream(cfg.seed, "select", t))
    active_compromised = (
        sorted(set(selected) & attacker.config.compromised) if attacker else []
    )

    # The controller observes the just-received global model before any
    # local work happens; it only steps when compromised nodes actually
    # participate this episode. On a stop signal, a configured fraction
    # of the active compromised nodes pauses (degree 0) while the rest
    # keep the last nonzero degree.
    node_gamma: dict[int, float] = {}
    gamma_episode = None
    if attacker and active_compromised:
        gamma_episode = attacker.gamma_for_episode(state)
        if gamma_episode == 0.0:
            paused = adv.stopped_nodes(active_compromised, attacker.config)
            fallback = attacker.state.gamma_current if attacker.adaptive else 0.0
            node_gamma = {
                i: (0.0 if i in paused else fallback) for i in active_compromised
            }
        else:
            node_gamma = {i: gamma_episode for i in active_compromised}

    def work(node_id: int) -> ModelUpdate:
        return _node_update(state, cfg, node_id, attacker, node_gamma)

    if cfg.workers and cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            submitted = list(pool.map(work, selected))
    else:
        submitted = [work(node_id) for node_id in selected]
    submitted.sort(key=lambda u: u.node_id)

    flagged: frozenset[int] = frozenset()
    verdicts: list[det.Verdict] = []
    if detector is not None and detector.kind != "off":
        verdicts = det.evaluate(
            submitted,
            detector,
            state.arch,
            state.global_params,
            state.server_validation,
        )
        flagged = frozenset(v.node_id for v in verdicts if v.flagged)

    survivors = [u for u in submitted if u.node_id not in flagged]
    if not survivors:
        raise EmptyAggregationError(t)

    state.global_params = aggregate(state.global_params, survivors)
    state.ledger.account(cfg.privacy)

    return RoundRecord(
        episode=t,
        selected=tuple(selected),
        submitted=tuple(submitted),
        flagged=flagged,
        global_params_after=state.global_params.copy(),
        global_val_loss=state.global_validation_loss(),
        delta_cumulative=state.ledger.cumulative_delta,
        verdicts=tuple(verdicts),
        active_compromised=tuple(active_compromised),
        gamma_episode=gamma_episode,
    )


def run_training(
    cfg: FederationConfig,
    shards: Sequence[NodeShard],
    arch: Architecture = None,
    attacker: Optional["Attacker"] = None,
    detector: Optional[det.DetectorConfig] = None,
    server_validation=None,
    state: Optional[FederationState] = None,
) -> tuple[FederationState, list[RoundRecord]]:
    """Run episodes until the configured count or the ledger stop."""
    if state is None:
        state = FederationState.create(cfg, shards, arch, server_validation)
    records = []
    for _ in range(cfg.episodes):
        records.append(run_episode(state, cfg, attacker, detector))
        if state.ledger.stopped:
            break
    return state, records


class Attacker:
    """Per-run attacker wrapper: mode, config, and controller state."""

    def __init__(self, kind: str, config: adv.AttackConfig):
        if kind not in ("rmd", "mpelm"):
            raise ValueError(f"unknown attack kind: {kind!r}")
        self.kind = kind
        self.config = config
        self.state = adv.AttackState.initial(config.gamma0)
        self.trace: list[dict] = []

    @property
    def adaptive(self) -> bool:
        return self.kind == "mpelm" and self.config.gamma_fixed is None

    def gamma_for_episode(self, state: FederationState) -> float:
        """Degree of poisoning for this episode; steps the controller when adaptive."""
        if self.kind == "rmd":
            return 0.0
        if self.config.gamma_fixed is not None:
            self.trace.append(
                {
                    "episode": state.episode,
                    "gamma_t": self.config.gamma_fixed,
                    "gamma_current": self.config.gamma_fixed,
                    "loss_ratio": float("nan"),
                    "avg_compromised_val_loss": float("nan"),
                }
            )
            return self.config.gamma_fixed
        shards = [state.shards[i] for i in sorted(self.config.compromised)]
        current = adv.episodic_loss(state.arch, state.global_params, shards)
        self.state = adv.tune_poison_degree(self.state, current, self.config)
        self.trace.append(
            {
                "episode": state.episode,
                "gamma_t": self.state.gamma_episode,
                "gamma_current": self.state.gamma_current,
                "loss_ratio": self.state.loss_ratio,
                "avg_compromised_val_loss": current,
            }
        )
        return self.state.gamma_episode
