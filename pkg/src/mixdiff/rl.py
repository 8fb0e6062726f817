"""Offline-RL utility pipeline: observation compression, state abstraction,
discrete batch-constrained Q-learning, and policy heatmap comparison.

Observations are compressed to a few covariance-maximising components
against the one-hot action block, clustered into discrete states, and a
tabular Q-learner restricted to well-supported actions is trained on the
resulting transitions.  Policies are compared through visitation-weighted
action frequency tables.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans

from .schema import DatasetSchema, ID_COLUMN, TIME_COLUMN, validate_table


@dataclass(frozen=True)
class ActionSpace:
    """Cartesian product of the declared action variables' levels."""

    variables: tuple[str, ...]
    levels: tuple[tuple[str, ...], ...]

    @property
    def size(self) -> int:
        return int(np.prod([len(lv) for lv in self.levels]))

    def encode(self, table: pd.DataFrame) -> np.ndarray:
        """Flat action id per row, row-major over the level product."""
        idx = np.zeros(len(table), dtype=np.int64)
        for name, lv in zip(self.variables, self.levels):
            codes = pd.Categorical(table[name].astype(str), categories=lv).codes
            if np.any(codes < 0):
                raise ValueError(f"value outside declared levels for action {name!r}")
            idx = idx * len(lv) + codes
        return idx

    def unravel(self, action_id: int) -> tuple[int, ...]:
        out = []
        for lv in reversed(self.levels):
            out.append(action_id % len(lv))
            action_id //= len(lv)
        return tuple(reversed(out))


def action_space(schema: DatasetSchema, action_vars: Sequence[str]) -> ActionSpace:
    levels = []
    for name in action_vars:
        v = schema.variable(name)
        if v.is_numeric:
            raise ValueError(f"action variable {name!r} must be binary or categorical")
        levels.append(v.levels)
    return ActionSpace(variables=tuple(action_vars), levels=tuple(levels))


def _observation_matrix(
    table: pd.DataFrame, schema: DatasetSchema, observation_vars: Sequence[str]
) -> np.ndarray:
    cols = []
    for name in observation_vars:
        v = schema.variable(name)
        if v.is_numeric:
            lo, hi = v.range
            cols.append(
                np.clip((table[name].to_numpy(float) - lo) / (hi - lo), 0.0, 1.0)[:, None]
            )
        else:
            codes = pd.Categorical(table[name].astype(str), categories=v.levels).codes
            onehot = np.zeros((len(table), len(v.levels)))
            onehot[np.arange(len(table)), codes] = 1.0
            cols.append(onehot)
    return np.hstack(cols)


def cross_decompose(
    observations: np.ndarray, actions: np.ndarray, k: int = 5
) -> tuple[np.ndarray, np.ndarray]:
    """Covariance-maximising projection of the observation block against the action block.

    Singular vectors of the centered cross-covariance give an orthonormal
    projection (width x k); returns (projection, scores).  Signs are fixed
    so each component's largest-magnitude weight is positive.  When the
    cross-covariance has rank below k the projection is narrowed, with a
    warning.
    """
    x = np.asarray(observations, float)
    y = np.asarray(actions, float)
    if x.shape[0] != y.shape[0]:
        raise ValueError("observation and action row counts differ")
    if k > x.shape[1]:
        raise ValueError(f"k={k} exceeds observation width {x.shape[1]}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cov = xc.T @ yc / max(len(x) - 1, 1)
    u, s, _ = np.linalg.svd(cov, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0
    if rank < k:
        warnings.warn(f"cross-covariance rank {rank} < k={k}; reducing components")
        k = max(rank, 1)
    proj = u[:, :k]
    flips = np.sign(proj[np.argmax(np.abs(proj), axis=0), np.arange(k)])
    flips[flips == 0] = 1.0
    proj = proj * flips
    return proj, xc @ proj


def build_states(
    features: np.ndarray, n_states: int = 100, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster feature rows into discrete states; returns (assignments, centroids)."""
    features = np.asarray(features, float)
    if len(features) < n_states:
        raise ValueError(f"need at least {n_states} rows, got {len(features)}")
    km = KMeans(
        n_clusters=n_states,
        init="k-means++",
        n_init=3,
        max_iter=50,
        random_state=seed,
    ).fit(features)
    return km.labels_.astype(np.int64), km.cluster_centers_


@dataclass
class MdpDataset:
    """Episodic transitions over discrete states and flat action ids."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    n_states: int
    action_space: ActionSpace

    def __post_init__(self):
        n = len(self.states)
        for name in ("actions", "rewards", "next_states", "terminals"):
            if len(getattr(self, name)) != n:
                raise ValueError("transition arrays must share one length")
        if n == 0:
            raise ValueError("empty transition set")


def band_reward(variable: str, low: float, high: float) -> Callable[[pd.DataFrame], np.ndarray]:
    """Toy reward: +1 for every row whose value lies inside [low, high]."""

    def fn(table: pd.DataFrame) -> np.ndarray:
        vals = table[variable].to_numpy(float)
        return ((vals >= low) & (vals <= high)).astype(float)

    return fn


def build_mdp(
    table: pd.DataFrame,
    schema: DatasetSchema,
    observation_vars: Sequence[str],
    action_vars: Sequence[str],
    reward_fn: Callable[[pd.DataFrame], np.ndarray],
    n_states: int = 100,
    n_components: int = 5,
    seed: int = 0,
) -> MdpDataset:
    """Full observation -> state pipeline plus per-episode transition extraction.

    The reward function maps the table to one value per row; a transition
    earns the reward of the row it lands on.  The last transition of each
    episode is terminal (no bootstrapping past it).
    """
    validate_table(table, schema)
    space = action_space(schema, action_vars)

    obs = _observation_matrix(table, schema, observation_vars)
    actions_onehot = np.zeros((len(table), space.size))
    action_ids = space.encode(table)
    actions_onehot[np.arange(len(table)), action_ids] = 1.0

    _, scores = cross_decompose(obs, actions_onehot, k=n_components)
    sd = scores.std(axis=0, ddof=0)
    sd[sd == 0] = 1.0
    states, _ = build_states((scores - scores.mean(axis=0)) / sd, n_states, seed)

    rewards = np.asarray(reward_fn(table), float)
    if rewards.shape != (len(table),):
        raise ValueError("reward function must return one value per row")

    codes, _ = pd.factorize(table[ID_COLUMN].astype(str))
    order = np.lexsort((table[TIME_COLUMN].to_numpy(), codes))
    codes, states, action_ids, rewards = (
        codes[order],
        states[order],
        action_ids[order],
        rewards[order],
    )
    same_episode = codes[1:] == codes[:-1]
    src = np.flatnonzero(same_episode)
    if src.size == 0:
        raise ValueError("no multi-step episodes; cannot form transitions")
    dst = src + 1
    last_of_episode = np.r_[~same_episode[1:], True][same_episode]
    return MdpDataset(
        states=states[src],
        actions=action_ids[src],
        rewards=rewards[dst],
        next_states=states[dst],
        terminals=last_of_episode,
        n_states=n_states,
        action_space=space,
    )


@dataclass
class BcqPolicy:
    """Tabular Q plus the behaviour counts that constrain action choice.

    ``greedy`` holds -1 for states never visited in the data; those are
    excluded from the policy.
    """

    q: np.ndarray
    behavior_counts: np.ndarray
    state_visits: np.ndarray
    tau_b: float
    greedy: np.ndarray
    action_space: ActionSpace

    def admissible(self, state: int) -> np.ndarray:
        counts = self.behavior_counts[state]
        top = counts.max()
        if top == 0:
            return np.zeros_like(counts, dtype=bool)
        return counts / top >= self.tau_b

    def to_dict(self) -> dict:
        return {
            "q": self.q.tolist(),
            "behavior_counts": self.behavior_counts.tolist(),
            "state_visits": self.state_visits.tolist(),
            "tau_b": self.tau_b,
            "greedy": self.greedy.tolist(),
            "action_variables": list(self.action_space.variables),
            "action_levels": [list(lv) for lv in self.action_space.levels],
        }


def bcq_train(
    data: MdpDataset,
    gamma: float = 0.99,
    alpha: float = 0.01,
    iterations: int = 100,
    tau_b: float = 0.3,
) -> BcqPolicy:
    """Batch-constrained tabular Q-learning.

    Each iteration sweeps every transition in order; the bootstrap max
    and the greedy policy range only over actions whose relative
    behaviour frequency in that state reaches ``tau_b``.
    """
    n_s, n_a = data.n_states, data.action_space.size
    counts = np.zeros((n_s, n_a), dtype=np.int64)
    np.add.at(counts, (data.states, data.actions), 1)
    visits = counts.sum(axis=1)

    top = counts.max(axis=1)
    admissible = np.zeros((n_s, n_a), dtype=bool)
    seen = top > 0
    admissible[seen] = counts[seen] / top[seen, None] >= tau_b

    unsupported = int(np.sum(~seen))
    if unsupported:
        warnings.warn(f"{unsupported} states have no observed actions; excluded from policy")

    q = np.zeros((n_s, n_a))
    masked = np.where(admissible, 0.0, -np.inf)
    for _ in range(iterations):
        best_next = np.max(q + masked, axis=1)
        best_next[~seen] = 0.0
        for s, a, r, s2, done in zip(
            data.states, data.actions, data.rewards, data.next_states, data.terminals
        ):
            target = r if done else r + gamma * best_next[s2]
            q[s, a] += alpha * (target - q[s, a])
            best_next[s] = np.max(np.where(admissible[s], q[s], -np.inf)) if seen[s] else 0.0

    greedy = np.full(n_s, -1, dtype=np.int64)
    for s in range(n_s):
        if seen[s]:
            greedy[s] = int(np.argmax(np.where(admissible[s], q[s], -np.inf)))
    return BcqPolicy(
        q=q,
        behavior_counts=counts,
        state_visits=visits,
        tau_b=tau_b,
        greedy=greedy,
        action_space=data.action_space,
    )


def action_frequencies(policy: BcqPolicy) -> np.ndarray:
    """Visitation-weighted frequency of each greedy action, summing to 1."""
    freq = np.zeros(policy.action_space.size)
    mask = policy.greedy >= 0
    weights = policy.state_visits[mask].astype(float)
    if weights.sum() == 0:
        raise ValueError("policy covers no visited states")
    np.add.at(freq, policy.greedy[mask], weights / weights.sum())
    return freq


def action_heatmap(policy: BcqPolicy, axis_vars: Sequence[str]) -> pd.DataFrame:
    """2-D percentage table of greedy-action usage over two action variables.

    Action variables beyond the two axes are marginalised out.
    """
    space = policy.action_space
    if len(axis_vars) != 2 or any(v not in space.variables for v in axis_vars):
        raise ValueError("axis_vars must name two declared action variables")
    i_row = space.variables.index(axis_vars[0])
    i_col = space.variables.index(axis_vars[1])
    rows, cols = space.levels[i_row], space.levels[i_col]
    table = np.zeros((len(rows), len(cols)))
    freq = action_frequencies(policy)
    for action_id, f in enumerate(freq):
        pos = space.unravel(action_id)
        table[pos[i_row], pos[i_col]] += f
    return pd.DataFrame(table * 100.0, index=list(rows), columns=list(cols))


def compare_policies(p_real: BcqPolicy, p_syn: BcqPolicy) -> float:
    """Total-variation distance between the two action frequency tables, in [0, 1]."""
    if p_real.action_space != p_syn.action_space:
        raise ValueError("policies use different action spaces")
    if p_real.q.shape[0] != p_syn.q.shape[0]:
        raise ValueError("policies use different state counts")
    return 0.5 * float(np.abs(action_frequencies(p_real) - action_frequencies(p_syn)).sum())
