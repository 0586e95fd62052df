"""Aggregator-side anomaly detection over submitted model updates.

Three filters: norm detection (squared L2 distance to the leave-one-out
mean), accuracy detection (validation-loss difference between candidate
global models), and mix (union of both). Every operation is a pure
function of the episode's update list, so verdicts can be computed
concurrently per node.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .model import Architecture, ModelUpdate, mse_loss


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = "off"  # "norm" | "accuracy" | "mix" | "off"
    beta1: float = 1.0
    beta2: float = 0.1
    d_max: float = 10.0
    orientation: str = "reversed"  # "reversed" flags loss-increasing models

    def __post_init__(self):
        if self.kind not in ("norm", "accuracy", "mix", "off"):
            raise ValueError(f"unknown detector kind: {self.kind!r}")
        if self.orientation not in ("reversed", "as_written"):
            raise ValueError(f"unknown orientation: {self.orientation!r}")
        if self.beta1 <= 0 or self.beta2 < 0 or self.d_max <= 0:
            raise ValueError("detector benchmarks must be positive")


@dataclass(frozen=True)
class Verdict:
    node_id: int
    rate: float
    components: dict = None

    @property
    def flagged(self) -> bool:
        return self.rate < 1.0


def comparison_standard(updates: Sequence[ModelUpdate], i: int) -> np.ndarray:
    """Mean of all updates except the i-th (leave-one-out reference)."""
    if len(updates) < 2:
        raise ValueError("comparison standard needs at least two updates")
    total = np.sum([u.delta for u in updates], axis=0)
    return (total - updates[i].delta) / (len(updates) - 1)


def norm_rate(updates: Sequence[ModelUpdate], i: int, cfg: DetectorConfig) -> Verdict:
    """Rate the i-th update by squared distance to its comparison standard.

    e1 is the distance relative to the standard's squared norm, capped at
    d_max; the rate is clamp(1 - max(0, e1 - beta1), 0, 1) and anything
    below 1 counts as flagged.
    """
    standard = comparison_standard(updates, i)
    diff = updates[i].delta - standard
    d = float(diff @ diff)
    st_sq = float(standard @ standard)

    if d == 0.0:
        e1 = 0.0
    elif st_sq == 0.0:
        e1 = cfg.d_max
    elif d < cfg.d_max * st_sq:
        e1 = d / st_sq
    else:
        e1 = cfg.d_max

    rate = min(1.0, max(0.0, 1.0 - max(0.0, e1 - cfg.beta1)))
    return Verdict(node_id=updates[i].node_id, rate=rate, components={"d": d, "e1": e1})


def loss_test_rate(loss_i: float, loss_st: float, cfg: DetectorConfig) -> tuple[float, float]:
    """(rate, e2) of the loss test given the two candidate losses.

    The default "reversed" orientation flags models whose candidate loss
    exceeds the standard's; "as_written" keeps the literal inverse case
    split. Equality at the benchmark rates 1 (not flagged).
    """
    if cfg.orientation == "reversed":
        if loss_i <= loss_st:
            delta_l = 0.0
        else:
            delta_l = (loss_i - loss_st) / loss_i
    else:
        if loss_st <= loss_i or loss_st == 0.0:
            delta_l = 0.0
        else:
            delta_l = (loss_st - loss_i) / loss_st

    e2 = delta_l
    rate = 1.0 if e2 <= cfg.beta2 else min(1.0, max(0.0, 1.0 - e2))
    return rate, e2


def accuracy_rate(
    updates: Sequence[ModelUpdate],
    i: int,
    cfg: DetectorConfig,
    arch: Architecture,
    global_params: np.ndarray,
    validation,
) -> Verdict:
    """Rate the i-th update by a loss test against its comparison standard.

    Two candidate globals are built (global + update, global + standard)
    and evaluated on the server validation set; the loss-test rule turns
    the pair of losses into a rate.
    """
    standard = comparison_standard(updates, i)
    loss_i = mse_loss(arch, global_params + updates[i].delta, validation)
    loss_st = mse_loss(arch, global_params + standard, validation)
    rate, e2 = loss_test_rate(loss_i, loss_st, cfg)
    return Verdict(
        node_id=updates[i].node_id,
        rate=rate,
        components={"e2": e2, "loss_i": loss_i, "loss_st": loss_st},
    )


def mix_filter(
    updates: Sequence[ModelUpdate],
    cfg: DetectorConfig,
    arch: Architecture = None,
    global_params: np.ndarray = None,
    validation=None,
) -> set[int]:
    """Node ids flagged by either norm or accuracy detection."""
    norm_v = evaluate(updates, replace(cfg, kind="norm"))
    acc_v = evaluate(updates, replace(cfg, kind="accuracy"), arch, global_params, validation)
    return {v.node_id for v in norm_v if v.flagged} | {v.node_id for v in acc_v if v.flagged}


def evaluate(
    updates: Sequence[ModelUpdate],
    cfg: DetectorConfig,
    arch: Architecture = None,
    global_params: np.ndarray = None,
    validation=None,
) -> list[Verdict]:
    """Verdicts for every submitted update under the configured detector.

    For mix detection, the per-node rate is the minimum of the norm and
    accuracy rates, so flagged(mix) is exactly the union of the two.
    """
    if cfg.kind == "off":
        return [Verdict(node_id=u.node_id, rate=1.0) for u in updates]
    if cfg.kind == "norm":
        return [norm_rate(updates, i, cfg) for i in range(len(updates))]
    if cfg.kind == "accuracy":
        return [
            accuracy_rate(updates, i, cfg, arch, global_params, validation)
            for i in range(len(updates))
        ]
    norm_v = [norm_rate(updates, i, cfg) for i in range(len(updates))]
    acc_v = [
        accuracy_rate(updates, i, cfg, arch, global_params, validation)
        for i in range(len(updates))
    ]
    return [
        Verdict(
            node_id=nv.node_id,
            rate=min(nv.rate, av.rate),
            components={"norm": nv.components, "accuracy": av.components},
        )
        for nv, av in zip(norm_v, acc_v)
    ]


def detection_accuracy(
    episodes: Sequence[Sequence[Verdict]],
    truth: set[int],
) -> float:
    """Mean per-episode percentage of correctly classified models.

    A model counts as correct when it is malicious (its node id is in
    ``truth``) and flagged, or benign and unflagged. Truth is intersected
    with each episode's participants.
    """
    if not episodes:
        return 0.0
    scores = []
    for verdicts in episodes:
        if not verdicts:
            continue
        correct = sum(
            1 for v in verdicts if (v.node_id in truth) == v.flagged
        )
        scores.append(100.0 * correct / len(verdicts))
    if not scores:
        return 0.0
    return float(np.mean(scores))
