"""Design-phase privacy-level selection via tabular Q-learning.

The agent walks a discrete grid of privacy-loss values. Its state couples
the grid index with binned attacker and federated losses looked up from
pre-generated tables; its reward balances attacker loss, federated loss,
and the privacy level itself. Transitions are deterministic, so the
learned Q-values converge to the Bellman fixed point and the mean
absolute Q change per episode is the convergence diagnostic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import substream


class Action(Enum):
    # ordinal doubles as the argmax tie-break order
    STATIC = 0
    DEC1 = 1
    DEC2 = 2
    INC1 = 3
    INC2 = 4

    @property
    def offset(self) -> int:
        return (0, -1, -2, 1, 2)[self.value]


ACTIONS = tuple(Action)

N_BINS = 10


@dataclass(frozen=True)
class RdpState:
    m_l_bin: int
    f_l_bin: int
    epsilon_index: int


@dataclass(frozen=True)
class RdpHyper:
    alpha: float = 0.001
    zeta: float = 0.5
    psi: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    explore_start: float = 1.0
    explore_min: float = 0.05
    max_episodes: int = 60_000

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("learning rate must be in (0, 1]")
        if not 0 <= self.zeta <= 1:
            raise ValueError("discount factor must be in [0, 1]")
        if any(p < 0 for p in self.psi):
            raise ValueError("balancing weights must be >= 0")


@dataclass
class LossTables:
    """Per-privacy-level attacker and federated losses, plus raw cells.

    ``cells`` holds one (epsilon, gamma, seed, m_l, f_l) row per generated
    run; a NaN loss marks a cell whose run failed. The reduced per-epsilon
    vectors average the valid cells over gamma values and seeds and must
    be fully finite and positive for training to proceed.
    """

    epsilon_grid: tuple[float, ...]
    m_l: np.ndarray  # per epsilon, averaged over gamma cells and seeds
    f_l: np.ndarray  # per epsilon, averaged over seeds
    cells: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.m_l = np.asarray(self.m_l, dtype=np.float64)
        self.f_l = np.asarray(self.f_l, dtype=np.float64)
        if len(self.m_l) != len(self.epsilon_grid) or len(self.f_l) != len(self.epsilon_grid):
            raise ValueError("loss vectors must align with the epsilon grid")

    def require_complete(self) -> None:
        """Training needs every grid point backed by valid positive losses."""
        if np.any(~np.isfinite(self.m_l)) or np.any(~np.isfinite(self.f_l)):
            raise ValueError("loss tables have grid points with no valid cells")
        if np.any(self.m_l <= 0) or np.any(self.f_l <= 0):
            raise ValueError("losses must be positive")

    @property
    def m_l_max(self) -> float:
        return float(np.max(self.m_l))

    @property
    def f_l_max(self) -> float:
        return float(np.max(self.f_l))

    def _bin_edges(self, values: np.ndarray) -> np.ndarray:
        qs = np.linspace(0, 1, N_BINS + 1)[1:-1]
        return np.quantile(values, qs)

    def bin_of(self, value: float, which: str) -> int:
        values = self.m_l if which == "m" else self.f_l
        return int(np.searchsorted(self._bin_edges(values), value, side="right"))

    def state_at(self, epsilon_index: int) -> RdpState:
        return RdpState(
            m_l_bin=self.bin_of(float(self.m_l[epsilon_index]), "m"),
            f_l_bin=self.bin_of(float(self.f_l[epsilon_index]), "f"),
            epsilon_index=epsilon_index,
        )


def default_epsilon_grid() -> tuple[float, ...]:
    """Design grid 0.1 .. 2.0 in steps of one 0.1 unit."""
    return tuple(round(0.1 * i, 1) for i in range(1, 21))


def reward(m_l: float, f_l: float, epsilon: float, tables: LossTables, hyper: RdpHyper) -> float:
    """psi1 * m_max/m + psi2 * f_max/f + psi3 / epsilon."""
    if m_l <= 0 or f_l <= 0 or epsilon <= 0:
        raise ValueError("reward inputs must be positive")
    p1, p2, p3 = hyper.psi
    return p1 * tables.m_l_max / m_l + p2 * tables.f_l_max / f_l + p3 / epsilon


def step(state: RdpState, action: Action, tables: LossTables) -> RdpState:
    """Move the privacy level along the grid, clamped at the boundaries."""
    idx = min(len(tables.epsilon_grid) - 1, max(0, state.epsilon_index + action.offset))
    return tables.state_at(idx)


class QTable:
    """State-action values with visit counts and a per-episode delta trace."""

    def __init__(self):
        self.values: dict[tuple, float] = {}
        self.visits: dict[tuple, int] = {}
        self.delta_trace: list[float] = []

    def get(self, state, action) -> float:
        return self.values.get((state, action), 0.0)

    def max_q(self, state, actions: Sequence = ACTIONS) -> float:
        return max(self.get(state, a) for a in actions)

    def argmax_action(self, state, actions: Sequence = ACTIONS):
        # ties break toward the lowest action ordinal
        return max(actions, key=lambda a: (self.get(state, a), -a.value))

    def rows(self):
        """(state, action, q) rows in deterministic order for persistence."""
        keyed = sorted(
            self.values.items(),
            key=lambda kv: (
                kv[0][0].m_l_bin,
                kv[0][0].f_l_bin,
                kv[0][0].epsilon_index,
                kv[0][1].value,
            ),
        )
        return [(s, a, q) for (s, a), q in keyed]


def q_update(q: QTable, s, a, r: float, s_next, hyper: RdpHyper, actions: Sequence = ACTIONS) -> float:
    """One-step Q update; returns |Q_new - Q_old|."""
    old = q.get(s, a)
    new = (1.0 - hyper.alpha) * old + hyper.alpha * (r + hyper.zeta * q.max_q(s_next, actions))
    q.values[(s, a)] = new
    q.visits[(s, a)] = q.visits.get((s, a), 0) + 1
    return abs(new - old)


def exploration_probability(episode: int, hyper: RdpHyper) -> float:
    """Linear decay from explore_start to explore_min over the first half
    of training, held at the minimum afterwards."""
    half = max(1, hyper.max_episodes // 2)
    frac = min(1.0, episode / half)
    return hyper.explore_start + frac * (hyper.explore_min - hyper.explore_start)


def fit_tabular(
    states: Sequence,
    actions: Sequence,
    transition: Callable,
    reward_fn: Callable,
    hyper: RdpHyper,
    seed: int,
) -> tuple[QTable, list[float]]:
    """Sweep trainer: each episode takes one epsilon-greedy transition
    from every state (actions must be Enum members so ties are ordered).

    Transitions and rewards must be deterministic; they are enumerated
    once into lookup tables so the sweep loop stays cheap. Updates within
    a sweep are applied sequentially, state by state. Returns the Q-table
    and the total reward collected per episode. On a deterministic
    environment the Q-values settle at the Bellman fixed point and the
    delta trace decays toward zero.
    """
    rng = substream(seed, "rdp-train")
    states = list(states)
    actions = sorted(actions, key=lambda a: a.value)  # argmax ties -> lowest ordinal
    n_s, n_a = len(states), len(actions)
    state_index = {s: i for i, s in enumerate(states)}

    next_idx = np.empty((n_s, n_a), dtype=np.intp)
    rewards = np.empty((n_s, n_a))
    for i, s in enumerate(states):
        for j, a in enumerate(actions):
            s2 = transition(s, a)
            if s2 not in state_index:
                raise ValueError(f"transition left the state set: {s2!r}")
            next_idx[i, j] = state_index[s2]
            rewards[i, j] = reward_fn(s, a, s2)
    if not np.all(np.isfinite(rewards)):
        raise ArithmeticError("non-finite rewards")

    # action ordinals ascend within each row, so ties in argmax already
    # break toward the lowest ordinal under a stable first-max scan
    qvals = np.zeros((n_s, n_a))
    visits = np.zeros((n_s, n_a), dtype=np.int64)
    alpha, zeta = hyper.alpha, hyper.zeta

    q = QTable()
    episode_rewards = []
    for episode in range(hyper.max_episodes):
        explore = exploration_probability(episode, hyper)
        explore_draws = rng.random(n_s)
        random_actions = rng.integers(n_a, size=n_s)
        delta_sum = 0.0
        ep_reward = 0.0
        for i in range(n_s):
            row = qvals[i]
            if explore_draws[i] < explore:
                j = random_actions[i]
            else:
                j = int(np.argmax(row))
            nxt = next_idx[i, j]
            r = rewards[i, j]
            old = row[j]
            new = (1.0 - alpha) * old + alpha * (r + zeta * qvals[nxt].max())
            row[j] = new
            visits[i, j] += 1
            delta_sum += abs(new - old)
            ep_reward += r
        mean_delta = delta_sum / n_s
        if not math.isfinite(mean_delta):
            raise ArithmeticError(f"non-finite Q values at episode {episode + 1}")
        q.delta_trace.append(mean_delta)
        episode_rewards.append(ep_reward)

    for i, s in enumerate(states):
        for j, a in enumerate(actions):
            q.values[(s, a)] = float(qvals[i, j])
            if visits[i, j]:
                q.visits[(s, a)] = int(visits[i, j])
    return q, episode_rewards


@dataclass
class TrainResult:
    qtable: QTable
    policy: dict[RdpState, Action]
    epsilon_star: float
    trace: list[dict]


def train(tables: LossTables, hyper: RdpHyper, seed: int) -> TrainResult:
    """Train the privacy-level agent on the loss tables.

    Returns the Q-table, the greedy policy, and the privacy loss reached
    by following the greedy policy to a fixed point from the middle of
    the grid. The trace carries the running cumulative reward, the mean
    absolute Q change, and the exploration probability per episode.
    """
    tables.require_complete()
    if hyper.zeta == 1.0:
        warnings.warn(
            "discount factor 1.0: Q-values have no fixed point here and the "
            "delta trace will not converge",
            RuntimeWarning,
            stacklevel=2,
        )
    states = [tables.state_at(i) for i in range(len(tables.epsilon_grid))]

    def transition(s, a):
        return step(s, a, tables)

    def reward_fn(_s, _a, s2):
        idx = s2.epsilon_index
        return reward(
            float(tables.m_l[idx]), float(tables.f_l[idx]), tables.epsilon_grid[idx], tables, hyper
        )

    q, episode_rewards = fit_tabular(states, ACTIONS, transition, reward_fn, hyper, seed)

    cumulative = 0.0
    trace = []
    for episode, (ep_reward, mean_delta) in enumerate(zip(episode_rewards, q.delta_trace), start=1):
        cumulative += ep_reward
        trace.append(
            {
                "episode": episode,
                "cumulative_reward": cumulative,
                "mean_abs_delta_q": mean_delta,
                "exploration_prob": exploration_probability(episode - 1, hyper),
            }
        )

    policy = {s: q.argmax_action(s) for s in states}
    epsilon_star = _greedy_fixed_point(tables, policy)
    return TrainResult(qtable=q, policy=policy, epsilon_star=epsilon_star, trace=trace)


def _greedy_fixed_point(tables: LossTables, policy: dict[RdpState, Action]) -> float:
    """Follow the greedy policy from the grid midpoint until the privacy
    level stops changing; a cycle settles on its lowest grid index."""
    idx = len(tables.epsilon_grid) // 2
    seen: list[int] = []
    for _ in range(4 * len(tables.epsilon_grid)):
        state = tables.state_at(idx)
        nxt = step(state, policy[state], tables).epsilon_index
        if nxt == idx:
            return tables.epsilon_grid[idx]
        if idx in seen:
            cycle = seen[seen.index(idx):]
            return tables.epsilon_grid[min(cycle)]
        seen.append(idx)
        idx = nxt
    return tables.epsilon_grid[idx]


def detect_assist(f_l_standard: float, f_l_observed: float, margin: float = 0.1) -> str:
    """Compare observed federated loss to the policy's standard value."""
    if f_l_standard <= 0 or f_l_observed <= 0:
        raise ValueError("losses must be positive")
    if f_l_observed > f_l_standard * (1.0 + margin):
        return "suspected_attack"
    return "clear"


def generate_loss_tables(
    epsilon_grid: Sequence[float],
    gamma_values: Sequence[float],
    seeds: Sequence[int],
    final_loss: Callable[[float, Optional[float], int], float],
) -> LossTables:
    """Build loss tables by running the federation at every grid point.

    ``final_loss(epsilon, gamma, seed)`` must return the final global
    validation loss of one run; gamma None means a benign run. Failed
    runs mark their cell invalid (NaN) rather than aborting the sweep;
    reductions average the valid cells.
    """
    cells = []
    f_by_eps = []
    m_by_eps = []
    for eps in epsilon_grid:
        benign = {}
        for seed in seeds:
            try:
                benign[seed] = final_loss(eps, None, seed)
            except Exception:
                benign[seed] = float("nan")
        attacked = []
        for gamma in gamma_values:
            for seed in seeds:
                try:
                    m_val = final_loss(eps, gamma, seed)
                except Exception:
                    m_val = float("nan")
                attacked.append(m_val)
                cells.append(
                    {
                        "epsilon": eps,
                        "gamma": gamma,
                        "seed": seed,
                        "m_l": m_val,
                        "f_l": benign[seed],
                    }
                )
        with np.errstate(all="ignore"):
            f_vals = np.array(list(benign.values()), dtype=np.float64)
            m_vals = np.array(attacked, dtype=np.float64)
            f_by_eps.append(float(np.nanmean(f_vals)) if np.any(np.isfinite(f_vals)) else float("nan"))
            m_by_eps.append(float(np.nanmean(m_vals)) if np.any(np.isfinite(m_vals)) else float("nan"))
    return LossTables(
        epsilon_grid=tuple(epsilon_grid),
        m_l=np.array(m_by_eps),
        f_l=np.array(f_by_eps),
        cells=cells,
    )
