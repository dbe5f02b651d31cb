# sim_env.py
"""
Time-slotted multi-agent environment.

Each slot every node picks a power index; failed nodes ignore their policy and
transmit at a uniformly random level. The environment turns the joint action
into SINRs, delivered bits, the shared team reward and the next observations.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Protocol

import numpy as np

from acoustic_channel import ChannelParams, gain_matrix, jain_fairness, shannon_rate, sinr, sinr_db
from topology import FailureMask, Topology, place_cylinder, sample_failures
from utils import atomic_write

logger = logging.getLogger(__name__)

POWER_LEVELS_W = np.array([0.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0])
N_ACTIONS = len(POWER_LEVELS_W)
OBS_DIM = 12

SINR_DB_FLOOR = -20.0
SINR_DB_CEIL = 40.0


class EpisodeFinishedError(RuntimeError):
    pass


class TraceFormatError(ValueError):
    pass


class Objective(str, Enum):
    MAX_CONCURRENT = "concurrent"
    MAX_CAPACITY = "capacity"
    MAX_FAIRNESS = "fairness"

    @classmethod
    def parse(cls, value) -> "Objective":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        aliases = {
            "concurrent": cls.MAX_CONCURRENT, "maxconcurrent": cls.MAX_CONCURRENT,
            "capacity": cls.MAX_CAPACITY, "maxcapacity": cls.MAX_CAPACITY,
            "fairness": cls.MAX_FAIRNESS, "maxfairness": cls.MAX_FAIRNESS,
        }
        if key not in aliases:
            raise ValueError(f"unknown objective {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class EpisodeConfig:
    slots_per_episode: int = 60
    slot_duration: float = 10.0
    objective: Objective = Objective.MAX_CONCURRENT
    epsilon_fail: float = 0.0
    battery_capacity: float = 1.0e6

    def __post_init__(self):
        if self.slots_per_episode < 1:
            raise ValueError(f"slots_per_episode must be >= 1, got {self.slots_per_episode}")
        if not self.slot_duration > 0:
            raise ValueError(f"slot_duration must be > 0, got {self.slot_duration}")
        if not 0.0 <= self.epsilon_fail <= 1.0:
            raise ValueError(f"epsilon_fail must lie in [0, 1], got {self.epsilon_fail}")
        if not self.battery_capacity > 0:
            raise ValueError(f"battery_capacity must be > 0, got {self.battery_capacity}")


@dataclass(frozen=True)
class Scenario:
    """Everything that determines one evaluation, apart from the channel constants."""
    n: int = 5
    epsilon_fail: float = 0.0
    objective: Objective = Objective.MAX_CONCURRENT
    placement: str = "deterministic"
    seed: int = 0
    slots: int = 60
    runs: int = 60
    radius: float = 4000.0
    height: float = 1000.0
    slot_duration: float = 10.0
    battery_capacity: float = 1.0e6

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective.parse(self.objective))
        if self.n < 1:
            raise ValueError(f"scenario needs n >= 1, got {self.n}")
        if self.runs < 1:
            raise ValueError(f"scenario needs runs >= 1, got {self.runs}")

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            slots_per_episode=self.slots,
            slot_duration=self.slot_duration,
            objective=self.objective,
            epsilon_fail=self.epsilon_fail,
            battery_capacity=self.battery_capacity,
        )

    def topology(self) -> Topology:
        return place_cylinder(self.n, self.radius, self.height, self.placement, self.seed)


@dataclass(frozen=True)
class SlotMetrics:
    actions: np.ndarray
    powers: np.ndarray
    sinr: np.ndarray
    success: np.ndarray
    bits: np.ndarray
    concurrent: int
    node_rewards: np.ndarray


@dataclass(frozen=True)
class StepResult:
    observations: np.ndarray
    reward: float
    metrics: SlotMetrics
    done: bool


def concurrent_count(sinrs, powers, beta: float, mask=None) -> int:
    """
    Number of links with power > 0 and SINR >= beta. mask restricts the count to
    eligible links (the environment passes the healthy nodes).
    """
    ok = (np.asarray(powers) > 0) & (np.asarray(sinrs) >= beta)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    return int(np.count_nonzero(ok))


def reward(objective: Objective, metrics: SlotMetrics, cumulative_bits,
           bandwidth_hz: float, slot_duration: float) -> float:
    """Scalar team reward shared by all agents."""
    if objective is Objective.MAX_CONCURRENT:
        return float(metrics.concurrent)
    if objective is Objective.MAX_CAPACITY:
        return float(np.sum(metrics.bits)) / (bandwidth_hz * slot_duration)
    cumulative = np.asarray(cumulative_bits, dtype=float)
    if not np.any(cumulative > 0):
        return 0.0
    return jain_fairness(cumulative)


def reward_scale(objective: Objective, n: int) -> float:
    if objective is Objective.MAX_CONCURRENT:
        return float(n)
    if objective is Objective.MAX_CAPACITY:
        return n * float(np.log2(1.0 + 10.0 ** (SINR_DB_CEIL / 10.0)))
    return 1.0


def scale_sinr_db(values) -> np.ndarray:
    db = np.clip(sinr_db(values), SINR_DB_FLOOR, SINR_DB_CEIL)
    return 2.0 * (db - SINR_DB_FLOOR) / (SINR_DB_CEIL - SINR_DB_FLOOR) - 1.0


class NetworkEnv:
    """
    One subnet of n transmitter/receiver pairs. Not shared between threads;
    run independent instances with independent seeds instead.
    """

    def __init__(self, topology: Topology, channel: ChannelParams, config: EpisodeConfig, seed=None):
        self.topology = topology
        self.channel = channel
        self.config = config
        self.gains = gain_matrix(topology, channel)
        self._rng = np.random.default_rng(seed)
        self._slot = 0
        self._done = True
        self.failures = FailureMask.none(self.n)
        self.battery = np.full(self.n, config.battery_capacity)
        self.cumulative_bits = np.zeros(self.n)

    @classmethod
    def from_scenario(cls, scenario: Scenario, channel: ChannelParams, seed=None) -> "NetworkEnv":
        return cls(scenario.topology(), channel, scenario.episode_config(),
                   seed=scenario.seed if seed is None else seed)

    @property
    def n(self) -> int:
        return self.topology.n

    @property
    def slot(self) -> int:
        return self._slot

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, seed=None) -> np.ndarray:
        """Full batteries, slot 0, a fresh failure mask; returns the slot-0 observations."""
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._slot = 0
        self._done = False
        self.battery = np.full(self.n, self.config.battery_capacity)
        self.cumulative_bits = np.zeros(self.n)
        self.failures = sample_failures(self.config.epsilon_fail, self.n, self._rng)
        return self._observe(
            prev_actions=None,
            prev_reward=0.0,
            prev_sinr=None,
            prev_success=np.zeros(self.n, dtype=bool),
        )

    def _observe(self, prev_actions, prev_reward, prev_sinr, prev_success) -> np.ndarray:
        n = self.n
        obs = np.zeros((n, OBS_DIM))
        obs[:, 0] = self.battery / self.config.battery_capacity
        if prev_actions is not None:
            obs[np.arange(n), 1 + np.asarray(prev_actions)] = 1.0
            scale = reward_scale(self.config.objective, n)
            obs[:, 8] = np.clip(prev_reward / scale, -1.0, 1.0)
            obs[:, 9] = scale_sinr_db(prev_sinr)
            obs[:, 10] = prev_success.astype(float)
        obs[:, 11] = self._slot / self.config.slots_per_episode
        return obs

    def step(self, actions) -> StepResult:
        if self._done:
            raise EpisodeFinishedError("episode finished; call reset() first")
        actions = np.asarray(actions, dtype=int)
        if actions.shape != (self.n,):
            raise ValueError(f"expected {self.n} actions, got shape {actions.shape}")
        if np.any((actions < 0) | (actions >= N_ACTIONS)):
            raise ValueError(f"power index out of range [0, {N_ACTIONS - 1}]: {actions}")

        # drawn every slot so the stream position never depends on the mask
        override = self._rng.integers(0, N_ACTIONS, size=self.n)
        effective = np.where(self.failures.failed, override, actions)

        cfg = self.config
        powers = POWER_LEVELS_W[effective]
        energy = powers * cfg.slot_duration
        starved = energy > self.battery
        if np.any(starved):
            effective = np.where(starved, 0, effective)
            powers = POWER_LEVELS_W[effective]
            energy = powers * cfg.slot_duration
        self.battery = self.battery - energy

        link_sinr = sinr(powers, self.gains, self.channel)
        success = (powers > 0) & (link_sinr >= self.channel.sinr_threshold)
        rate = shannon_rate(link_sinr, self.channel.bandwidth_hz)
        bits = np.where(success, rate * cfg.slot_duration, 0.0)
        self.cumulative_bits = self.cumulative_bits + bits

        metrics = SlotMetrics(
            actions=effective,
            powers=powers,
            sinr=link_sinr,
            success=success,
            bits=bits,
            concurrent=concurrent_count(link_sinr, powers, self.channel.sinr_threshold, self.failures.healthy),
            node_rewards=bits / (self.channel.bandwidth_hz * cfg.slot_duration),
        )
        team = reward(cfg.objective, metrics, self.cumulative_bits, self.channel.bandwidth_hz, cfg.slot_duration)

        self._slot += 1
        self._done = self._slot >= cfg.slots_per_episode
        obs = self._observe(effective, team, link_sinr, success)
        return StepResult(observations=obs, reward=team, metrics=metrics, done=self._done)


class Policy(Protocol):
    def begin_episode(self, n: int) -> None: ...

    def act(self, slot: int, observations: np.ndarray) -> np.ndarray: ...


@dataclass
class EpisodeTrace:
    observations: np.ndarray    # (T, n, OBS_DIM), the observation each action was chosen from
    actions: np.ndarray         # (T, n) effective power indices
    rewards: np.ndarray         # (T,)
    node_rewards: np.ndarray    # (T, n)
    sinr: np.ndarray            # (T, n)
    bits: np.ndarray            # (T, n)
    success: np.ndarray         # (T, n)
    concurrent: np.ndarray      # (T,)
    failed: np.ndarray          # (n,)
    done: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.done is None:
            done = np.zeros(len(self.rewards), dtype=bool)
            if len(done):
                done[-1] = True
            self.done = done

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def n(self) -> int:
        return self.actions.shape[1]

    @property
    def mean_concurrent(self) -> float:
        return float(np.mean(self.concurrent)) if len(self) else 0.0

    @property
    def capacity_kb(self) -> float:
        return float(np.sum(self.bits)) / 1000.0

    @property
    def fairness(self) -> float:
        per_node = np.sum(self.bits, axis=0)
        if not np.any(per_node > 0):
            return 0.0
        return jain_fairness(per_node)

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards)) if len(self) else 0.0


def run_episode(env: NetworkEnv, policy: Policy, seed=None) -> EpisodeTrace:
    obs = env.reset(seed)
    policy.begin_episode(env.n)
    rows = []
    done = False
    while not done:
        actions = policy.act(env.slot, obs)
        result = env.step(actions)
        rows.append((obs, result.metrics.actions, result))
        obs = result.observations
        done = result.done

    return EpisodeTrace(
        observations=np.stack([r[0] for r in rows]),
        actions=np.stack([r[1] for r in rows]),
        rewards=np.array([r[2].reward for r in rows]),
        node_rewards=np.stack([r[2].metrics.node_rewards for r in rows]),
        sinr=np.stack([r[2].metrics.sinr for r in rows]),
        bits=np.stack([r[2].metrics.bits for r in rows]),
        success=np.stack([r[2].metrics.success for r in rows]),
        concurrent=np.array([r[2].metrics.concurrent for r in rows]),
        failed=env.failures.failed.copy(),
    )


_TRACE_FIELDS = ("actions", "rewards", "node_rewards", "sinr", "bits", "success", "concurrent", "failed")


def traces_to_arrays(traces: list[EpisodeTrace]) -> dict:
    if not traces:
        return {
            "actions": np.zeros((0, 0, 0), dtype=int),
            "rewards": np.zeros((0, 0)),
            "node_rewards": np.zeros((0, 0, 0)),
            "sinr": np.zeros((0, 0, 0)),
            "bits": np.zeros((0, 0, 0)),
            "success": np.zeros((0, 0, 0), dtype=bool),
            "concurrent": np.zeros((0, 0), dtype=int),
            "failed": np.zeros((0, 0), dtype=bool),
        }
    return {name: np.stack([getattr(t, name) for t in traces]) for name in _TRACE_FIELDS}


def load_trace_arrays(path) -> dict:
    """Read a trace file written by save_traces; raises TraceFormatError if malformed."""
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: data[name] for name in _TRACE_FIELDS}
    except (KeyError, ValueError, EOFError) as e:
        raise TraceFormatError(f"malformed trace file {path}: {e}") from e

    runs = arrays["rewards"].shape[0]
    if arrays["rewards"].ndim != 2 or arrays["actions"].ndim != 3:
        raise TraceFormatError(f"malformed trace file {path}: unexpected array ranks")
    slots = arrays["rewards"].shape[1]
    for name in ("actions", "node_rewards", "sinr", "bits", "success"):
        if arrays[name].shape[:2] != (runs, slots):
            raise TraceFormatError(f"malformed trace file {path}: {name} has shape {arrays[name].shape}")
    return arrays


def save_traces(path, traces: list[EpisodeTrace]):
    arrays = traces_to_arrays(traces)
    return atomic_write(path, lambda fh: np.savez(fh, **arrays))
