"""Tabular Q-learning offload agent with a periodically synced target table.

One episode walks the layers in storage order and places each on the CPU or
the FPGA. The reward of a step is the negative growth of the simulated
makespan (plus ``energy_weight`` times energy growth) caused by that
placement, so an episode's return is minus its objective.
"""
from __future__ import annotations

import bisect
import enum
import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, TooManyLayers
from .graph import ModelGraph, graph_costs, validate_graph
from .platforms import AccelConfig, Platforms, minimal_tile_bytes
from .simulator import Assignment, Placement, Simulator

QTABLE_HEADER = "# agentsim-qtable v1"


class ActionChoice(enum.IntEnum):
    RUN_ON_CPU = 0
    OFFLOAD_TO_FPGA = 1

    @property
    def placement(self):
        return Placement.FPGA if self else Placement.CPU


class AgentState(NamedTuple):
    layer_index: int
    prev_placement: Placement | None
    intensity_bucket: int
    occupancy_bucket: int


@dataclass
class AgentConfig:
    alpha: float = 0.1
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay: float = 0.995
    sync_period_n: int = 100
    episodes: int = 2000
    reward_energy_weight: float = 0.0
    rng_seed: int = 0
    intensity_buckets: int = 8
    intensity_range: tuple = (0.5, 256.0)
    occupancy_edges: tuple = (0.01, 0.1, 1.0)
    action_table: str = "primary"

    def __post_init__(self):
        self.intensity_range = tuple(self.intensity_range)
        self.occupancy_edges = tuple(self.occupancy_edges)
        checks = [
            (0 < self.alpha <= 1, "alpha must lie in (0, 1]"),
            (0 <= self.gamma < 1, "gamma must lie in [0, 1)"),
            (0 <= self.epsilon_start <= 1 and 0 <= self.epsilon_end <= 1, "epsilons must lie in [0, 1]"),
            (self.epsilon_end <= self.epsilon_start, "epsilon_end must not exceed epsilon_start"),
            (0 < self.epsilon_decay <= 1, "epsilon_decay must lie in (0, 1]"),
            (self.sync_period_n >= 1, "sync_period_n must be >= 1"),
            (self.episodes >= 1, "episodes must be >= 1"),
            (self.reward_energy_weight >= 0, "reward_energy_weight must be >= 0"),
            (self.intensity_buckets >= 2, "intensity_buckets must be >= 2"),
            (len(self.occupancy_edges) == 3, "occupancy_edges needs 3 edges (4 buckets)"),
            (self.action_table in ("primary", "target"), "action_table must be 'primary' or 'target'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg, field="agent")

    def to_dict(self):
        d = asdict(self)
        d["intensity_range"] = list(self.intensity_range)
        d["occupancy_edges"] = list(self.occupancy_edges)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc), field="agent") from None

    def epsilon_at(self, episode):
        return max(self.epsilon_end, self.epsilon_start * self.epsilon_decay**episode)

    @property
    def intensity_edges(self):
        lo, hi = self.intensity_range
        return tuple(np.geomspace(lo, hi, self.intensity_buckets - 2).tolist()) if self.intensity_buckets > 2 else ()


@dataclass
class QTablePair:
    q_primary: dict = field(default_factory=dict)
    q_target: dict = field(default_factory=dict)
    steps_since_sync: int = 0

    def values(self, s, table="primary"):
        return (self.q_primary if table == "primary" else self.q_target).get(s, (0.0, 0.0))

    def sync(self):
        self.q_target = {s: list(v) for s, v in self.q_primary.items()}
        self.steps_since_sync = 0

    def save(self, path):
        lines = [QTABLE_HEADER, f"steps_since_sync {self.steps_since_sync}",
                 "# table layer_index prev_placement intensity_bucket occupancy_bucket q_cpu q_fpga"]
        for tag, table in (("A", self.q_primary), ("B", self.q_target)):
            for s in sorted(table, key=_state_sort_key):
                prev = "none" if s.prev_placement is None else s.prev_placement.value
                q0, q1 = table[s]
                lines.append(f"{tag} {s.layer_index} {prev} {s.intensity_bucket} "
                             f"{s.occupancy_bucket} {q0!r} {q1!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0].strip() != QTABLE_HEADER:
            raise ConfigError("not a v1 Q-table file", path)
        q = cls()
        for ln, line in enumerate(lines[1:], start=2):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "steps_since_sync":
                q.steps_since_sync = int(parts[1])
                continue
            try:
                tag, idx, prev, ib, ob, q0, q1 = parts
                s = AgentState(int(idx), None if prev == "none" else Placement(prev), int(ib), int(ob))
                (q.q_primary if tag == "A" else q.q_target)[s] = [float(q0), float(q1)]
            except ValueError:
                raise ConfigError(f"malformed line {ln}", path) from None
        return q


def _state_sort_key(s):
    prev = -1 if s.prev_placement is None else int(s.prev_placement is Placement.FPGA)
    return (s.layer_index, prev, s.intensity_bucket, s.occupancy_bucket)


def intensity_bucket(intensity, cfg: AgentConfig):
    if intensity <= 0:
        return 0
    return min(cfg.intensity_buckets - 1, 1 + bisect.bisect_right(cfg.intensity_edges, intensity))


def occupancy_bucket(fraction, cfg: AgentConfig):
    return bisect.bisect_left(cfg.occupancy_edges, fraction) if fraction <= cfg.occupancy_edges[-1] else 3


def encode_state(graph, costs, layer_index, prev_placement, accel_cfg: AccelConfig, cfg=None) -> AgentState:
    cfg = cfg or AgentConfig()
    cost = costs[graph.layers[layer_index].id]
    frac = minimal_tile_bytes(cost) / accel_cfg.onchip_buffer_bytes
    prev = None if prev_placement is None else Placement(prev_placement)
    return AgentState(
        layer_index, prev, intensity_bucket(cost.arithmetic_intensity, cfg), occupancy_bucket(frac, cfg)
    )


def select_action(q: QTablePair, s: AgentState, epsilon, rng, table="primary") -> ActionChoice:
    """Epsilon-greedy over ``table`` (primary by default); ties go to the CPU."""
    if epsilon > 0 and rng.random() < epsilon:
        return ActionChoice(int(rng.integers(2)))
    q_cpu, q_fpga = q.values(s, table)
    return ActionChoice.OFFLOAD_TO_FPGA if q_fpga > q_cpu else ActionChoice.RUN_ON_CPU


def td_update(q: QTablePair, s, a, reward, s_next, cfg: AgentConfig) -> QTablePair:
    """One temporal-difference step bootstrapped from the target table.

    ``s_next=None`` marks a terminal transition. The target table is
    replaced by a copy of the primary every ``cfg.sync_period_n`` updates.
    """
    row = q.q_primary.get(s)
    if row is None:
        row = q.q_primary[s] = [0.0, 0.0]
    future = 0.0
    if s_next is not None:
        t = q.q_target.get(s_next)
        if t is not None:
            future = max(t)
    a = int(a)
    row[a] += cfg.alpha * (reward + cfg.gamma * future - row[a])
    q.steps_since_sync += 1
    if q.steps_since_sync >= cfg.sync_period_n:
        q.sync()
    return q


@dataclass
class TrainResult:
    q: QTablePair
    best_assignment: Assignment
    episode_costs: list
    objective: float
    forced_cpu: tuple


class _Env:
    """Per-layer static context shared by training and greedy rollout."""

    def __init__(self, graph, platforms, cfg, host="cpu", simulator=None):
        self.sim = simulator or Simulator(graph, platforms, host=host)
        self.graph = graph
        self.cfg = cfg
        costs = self.sim.costs
        accel = platforms.accel
        self.buckets = [
            (
                intensity_bucket(costs[layer.id].arithmetic_intensity, cfg),
                occupancy_bucket(minimal_tile_bytes(costs[layer.id]) / accel.onchip_buffer_bytes, cfg),
            )
            for layer in graph.layers
        ]
        self.forced = tuple(not self.sim.fpga_feasible(i) for i in range(len(graph)))
        self.n = len(graph)

    def state(self, i, prev_bit):
        prev = None if prev_bit is None else (Placement.FPGA if prev_bit else Placement.CPU)
        ib, ob = self.buckets[i]
        return AgentState(i, prev, ib, ob)

    def cost(self, bits):
        m, e = self.sim.prefix_cost(bits)
        return m + self.cfg.reward_energy_weight * e

    def greedy(self, q):
        bits = []
        prev = None
        for i in range(self.n):
            s = self.state(i, prev)
            a = 0 if self.forced[i] else int(select_action(q, s, 0.0, None, self.cfg.action_table))
            bits.append(a)
            prev = a
        return tuple(bits)


def train_agent(graph: ModelGraph, platforms: Platforms, agent_cfg: AgentConfig | None = None,
                host="cpu", q: QTablePair | None = None, simulator=None) -> TrainResult:
    """Train the offload policy by simulated episodes; deterministic per ``rng_seed``."""
    cfg = agent_cfg or AgentConfig()
    validate_graph(graph)
    env = _Env(graph, platforms, cfg, host, simulator)
    rng = np.random.default_rng(cfg.rng_seed)
    q = q if q is not None else QTablePair()
    episode_costs = []
    n = env.n
    for ep in range(cfg.episodes):
        eps = cfg.epsilon_at(ep)
        bits = ()
        prev_cost = 0.0
        prev = None
        s = env.state(0, None)
        for i in range(n):
            if env.forced[i]:
                a = ActionChoice.RUN_ON_CPU
            else:
                a = select_action(q, s, eps, rng, cfg.action_table)
            bits = bits + (int(a),)
            cost = env.cost(bits)
            reward = -(cost - prev_cost)
            prev_cost = cost
            prev = int(a)
            s_next = env.state(i + 1, prev) if i + 1 < n else None
            td_update(q, s, a, reward, s_next, cfg)
            s = s_next
        episode_costs.append(prev_cost)
    bits = env.greedy(q)
    return TrainResult(
        q=q,
        best_assignment=Assignment.from_vector(graph, bits),
        episode_costs=episode_costs,
        objective=env.cost(bits),
        forced_cpu=env.forced,
    )


def greedy_assignment(graph, platforms, q: QTablePair, agent_cfg=None, host="cpu") -> Assignment:
    """Frozen-policy placement of ``graph`` under ``q`` (no learning)."""
    env = _Env(graph, platforms, agent_cfg or AgentConfig(), host)
    return Assignment.from_vector(graph, env.greedy(q))


def heuristic_baseline(graph, costs, threshold, accel_cfg: AccelConfig | None = None) -> Assignment:
    """FPGA for every layer whose arithmetic intensity reaches ``threshold``.

    With ``accel_cfg`` given, layers that cannot be tiled stay on the CPU.
    """
    placements = []
    for layer in graph.layers:
        c = costs[layer.id]
        tileable = accel_cfg is None or minimal_tile_bytes(c) <= accel_cfg.onchip_buffer_bytes
        placements.append(Placement.FPGA if tileable and c.arithmetic_intensity >= threshold else Placement.CPU)
    return Assignment(graph.layer_ids, tuple(placements))


@dataclass
class SearchResult:
    assignment: Assignment
    objective: float
    evaluated: int = 0
    threshold: float | None = None


def best_threshold_heuristic(graph, platforms, energy_weight=0.0, host="cpu", simulator=None) -> SearchResult:
    """Sweep the heuristic threshold over every layer intensity (and infinity)."""
    sim = simulator or Simulator(graph, platforms, host=host)
    costs = sim.costs
    accel = platforms.accel if sim.fpga_usable else None
    thresholds = sorted({c.arithmetic_intensity for c in costs.values()}) + [math.inf]
    best = None
    for th in thresholds:
        if accel is None and th != math.inf:
            continue
        a = heuristic_baseline(graph, costs, th, accel)
        obj = sim.objective(a.vector, energy_weight)
        if best is None or obj < best.objective:
            best = SearchResult(a, obj, threshold=th)
        best.evaluated += 1
    return best


def brute_force_partition(graph, platforms, max_layers=14, energy_weight=0.0, host="cpu",
                          simulator=None) -> SearchResult:
    """Exhaustive search over all CPU/FPGA vectors; layers the FPGA cannot run stay on CPU."""
    if len(graph) > max_layers:
        raise TooManyLayers(f"{len(graph)} layers exceeds max_layers={max_layers}")
    sim = simulator or Simulator(graph, platforms, host=host)
    free = [i for i in range(len(graph)) if sim.fpga_feasible(i)]
    best_bits, best_obj, count = None, math.inf, 0
    for choice in itertools.product((0, 1), repeat=len(free)):
        bits = [0] * len(graph)
        for i, b in zip(free, choice):
            bits[i] = b
        obj = sim.objective(bits, energy_weight)
        count += 1
        if obj < best_obj:
            best_bits, best_obj = tuple(bits), obj
    return SearchResult(Assignment.from_vector(graph, best_bits), best_obj, count)


# -- estimator interface ---------------------------------------------------------

class _SchedulerMixin:
    """Shared ``fit``/``predict`` plumbing: X is a :class:`ModelGraph`."""

    def _platforms(self):
        if self.platforms is None:
            raise ValueError(f"{type(self).__name__} needs a platforms argument")
        from .platforms import load_platforms
        return load_platforms(self.platforms)

    def fit_predict(self, graph, y=None):
        return self.fit(graph).assignment_

    def score(self, graph, y=None):
        """Negative simulated objective of the predicted assignment (higher is better)."""
        sim = Simulator(graph, self._platforms(), host=self.host)
        return -sim.objective(self.predict(graph).vector, self.energy_weight)


class QLearningScheduler(_SchedulerMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`train_agent`.

    ``fit(graph)`` learns ``q_``; ``predict(graph)`` returns the greedy
    :class:`Assignment` for any graph under the frozen table.
    """

    def __init__(self, platforms=None, alpha=0.1, gamma=0.95, epsilon_start=1.0, epsilon_end=0.05,
                 epsilon_decay=0.995, sync_period=100, episodes=2000, energy_weight=0.0,
                 random_state=0, host="cpu"):
        self.platforms = platforms
        self.alpha = alpha
        self.gamma = gamma
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.epsilon_decay = epsilon_decay
        self.sync_period = sync_period
        self.episodes = episodes
        self.energy_weight = energy_weight
        self.random_state = random_state
        self.host = host

    def agent_config(self):
        return AgentConfig(
            alpha=self.alpha, gamma=self.gamma, epsilon_start=self.epsilon_start,
            epsilon_end=self.epsilon_end, epsilon_decay=self.epsilon_decay,
            sync_period_n=self.sync_period, episodes=self.episodes,
            reward_energy_weight=self.energy_weight, rng_seed=self.random_state,
        )

    def fit(self, graph, y=None):
        result = train_agent(graph, self._platforms(), self.agent_config(), host=self.host)
        self.q_ = result.q
        self.assignment_ = result.best_assignment
        self.episode_costs_ = np.asarray(result.episode_costs)
        self.objective_ = result.objective
        return self

    def predict(self, graph):
        check_is_fitted(self, "q_")
        return greedy_assignment(graph, self._platforms(), self.q_, self.agent_config(), self.host)


class IntensityThresholdScheduler(_SchedulerMixin, BaseEstimator):
    """Offload by arithmetic intensity; ``threshold="auto"`` sweeps for the best value on fit."""

    def __init__(self, platforms=None, threshold="auto", energy_weight=0.0, host="cpu"):
        self.platforms = platforms
        self.threshold = threshold
        self.energy_weight = energy_weight
        self.host = host

    def fit(self, graph, y=None):
        platforms = self._platforms()
        if self.threshold == "auto":
            res = best_threshold_heuristic(graph, platforms, self.energy_weight, self.host)
            self.threshold_ = res.threshold
        else:
            self.threshold_ = float(self.threshold)
        self.assignment_ = self.predict(graph)
        return self

    def predict(self, graph):
        check_is_fitted(self, "threshold_")
        platforms = self._platforms()
        accel = platforms.accel if Simulator(graph, platforms, self.host).fpga_usable else None
        if accel is None:
            return Assignment.uniform(graph, Placement.CPU)
        return heuristic_baseline(graph, graph_costs(graph, accel.bytes_per_element), self.threshold_, accel)


class ExhaustiveScheduler(_SchedulerMixin, BaseEstimator):
    """Optimal placement by enumeration (small graphs only)."""

    def __init__(self, platforms=None, max_layers=14, energy_weight=0.0, host="cpu"):
        self.platforms = platforms
        self.max_layers = max_layers
        self.energy_weight = energy_weight
        self.host = host

    def fit(self, graph, y=None):
        res = brute_force_partition(graph, self._platforms(), self.max_layers, self.energy_weight, self.host)
        self.graph_ = graph
        self.assignment_ = res.assignment
        self.objective_ = res.objective
        return self

    def predict(self, graph):
        check_is_fitted(self, "assignment_")
        if graph == self.graph_:
            return self.assignment_
        return brute_force_partition(
            graph, self._platforms(), self.max_layers, self.energy_weight, self.host
        ).assignment
