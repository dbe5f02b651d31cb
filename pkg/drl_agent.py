# drl_agent.py
"""
Deep recurrent Q-learning: epsilon-greedy behaviour, an episode replay buffer,
TD targets from a target network and periodic hard target syncs.

Two training modes:
  coordinated - every agent learns from the shared team reward and the sink
                periodically averages their parameters (federation.SinkNode)
  iql         - every agent learns from its own delivered bits, no exchange
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from acoustic_channel import ChannelParams
from federation import ParamSnapshot, SinkConfig, SinkNode, fedavg
from neural import (AdamState, NumericalError, QNetParams, adam_step, bptt_gradients, forward,
                    init_params, initial_state, unroll)
from sim_env import NetworkEnv, Scenario, run_episode

logger = logging.getLogger(__name__)


class TrainingMode(str, Enum):
    COORDINATED = "coordinated"
    IQL = "iql"

    @classmethod
    def parse(cls, value) -> "TrainingMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        if key in ("coordinated", "uhpnf", "federated"):
            return cls.COORDINATED
        if key == "iql":
            return cls.IQL
        raise ValueError(f"unknown training mode {value!r}")


@dataclass(frozen=True)
class TrainConfig:
    total_episodes: int = 300_000
    batch_size: int = 32
    buffer_capacity: int = 10_000
    target_update_period: int = 200
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 150_000
    learning_rate: float = 1e-3
    curve_every: int = 100

    def __post_init__(self):
        if self.total_episodes < 0:
            raise ValueError(f"total_episodes must be >= 0, got {self.total_episodes}")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError(f"need 1 <= batch_size <= buffer_capacity, got {self.batch_size}, {self.buffer_capacity}")
        if self.target_update_period < 1 or self.curve_every < 1 or self.epsilon_decay_episodes < 1:
            raise ValueError("target_update_period, curve_every and epsilon_decay_episodes must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValueError(f"need 0 <= epsilon_end <= epsilon_start <= 1, got {self.epsilon_end}, {self.epsilon_start}")


DEFAULT_TRAIN = TrainConfig()


def epsilon(episode: int, config: TrainConfig = DEFAULT_TRAIN) -> float:
    """Linear decay from epsilon_start to epsilon_end, then constant."""
    if episode < 0:
        raise ValueError(f"episode must be >= 0, got {episode}")
    slope = (config.epsilon_start - config.epsilon_end) / config.epsilon_decay_episodes
    return max(config.epsilon_end, config.epsilon_start - slope * episode)


def select_action(q, eps: float, rng: np.random.Generator) -> int:
    """Uniform with probability eps, else argmax with the lowest index winning ties."""
    q = np.asarray(q)
    if rng.random() < eps:
        return int(rng.integers(q.shape[-1]))
    return int(np.argmax(q))


def td_target(reward: float, max_next_q: float, done: bool, gamma: float) -> float:
    return reward if done else reward + gamma * max_next_q


@dataclass(frozen=True)
class EpisodeSample:
    """One agent's view of one episode."""
    observations: np.ndarray    # (T, obs_dim)
    actions: np.ndarray         # (T,)
    rewards: np.ndarray         # (T,)


class ReplayBuffer:
    """FIFO ring of whole episodes."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._episodes = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._episodes)

    def push(self, sample: EpisodeSample) -> None:
        self._episodes.append(sample)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[EpisodeSample]:
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return [self._episodes[i] for i in idx]

    def oldest(self) -> EpisodeSample | None:
        return self._episodes[0] if self._episodes else None


@dataclass(frozen=True)
class TrainStepResult:
    params: QNetParams
    adam: AdamState
    loss: float


def train_step(online: QNetParams, target: QNetParams, buffer: ReplayBuffer, config: TrainConfig,
               adam: AdamState, rng: np.random.Generator) -> TrainStepResult | None:
    """
    One Adam step on a minibatch of whole episodes. Returns None while the buffer
    holds fewer than batch_size episodes.
    """
    if len(buffer) < config.batch_size:
        return None
    batch = buffer.sample(config.batch_size, rng)
    lengths = {len(s.rewards) for s in batch}
    if len(lengths) != 1:
        raise ValueError(f"minibatch episodes differ in length: {sorted(lengths)}")

    obs = np.stack([s.observations for s in batch], axis=1)
    actions = np.stack([s.actions for s in batch], axis=1)
    rewards = np.stack([s.rewards for s in batch], axis=1)

    q_target, _ = unroll(target, obs)
    targets = rewards.astype(float).copy()
    # last slot is terminal
    targets[:-1] += config.gamma * q_target[1:].max(axis=2)

    loss, grads = bptt_gradients(online, obs, actions, targets)
    params, adam = adam_step(online, grads, adam, lr=config.learning_rate)
    return TrainStepResult(params=params, adam=adam, loss=loss)


def update_target(online: QNetParams, target: QNetParams, episode: int, period: int) -> QNetParams:
    """Hard copy of the online network on every multiple of period."""
    if episode > 0 and episode % period == 0:
        return online.copy()
    return target


class DrqnAgent:
    def __init__(self, agent_id: str, params: QNetParams, config: TrainConfig):
        self.agent_id = agent_id
        self.config = config
        self.online = params.copy()
        self.target = params.copy()
        self.adam = AdamState.zeros(params.arch.param_count)
        self.buffer = ReplayBuffer(config.buffer_capacity)

    def remember(self, sample: EpisodeSample) -> None:
        self.buffer.push(sample)

    def learn(self, rng: np.random.Generator) -> float | None:
        result = train_step(self.online, self.target, self.buffer, self.config, self.adam, rng)
        if result is None:
            return None
        self.online, self.adam = result.params, result.adam
        return result.loss

    def sync_target(self, episode: int) -> None:
        self.target = update_target(self.online, self.target, episode, self.config.target_update_period)

    def snapshot(self, episode: int) -> ParamSnapshot:
        return ParamSnapshot.from_params(self.online, agent_id=self.agent_id, episode=episode)

    def load_snapshot(self, snapshot: ParamSnapshot) -> None:
        self.online = snapshot.to_params()


class RecurrentQPolicy:
    """Per-node recurrent Q-networks acting epsilon-greedily; hidden state resets each episode."""

    def __init__(self, node_params: list[QNetParams], eps: float = 0.0, rng: np.random.Generator | None = None):
        self.node_params = list(node_params)
        self.eps = eps
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._hidden = []

    def begin_episode(self, n: int) -> None:
        if n != len(self.node_params):
            raise ValueError(f"policy holds {len(self.node_params)} networks, environment has {n} nodes")
        self._hidden = [initial_state(arch=p.arch) for p in self.node_params]

    def act(self, slot: int, observations: np.ndarray) -> np.ndarray:
        actions = np.empty(len(self.node_params), dtype=int)
        for i, params in enumerate(self.node_params):
            q, self._hidden[i] = forward(params, observations[i], self._hidden[i])
            actions[i] = select_action(q, self.eps, self.rng)
        return actions


@dataclass(frozen=True)
class CurvePoint:
    episode: int
    epsilon: float
    mean_reward: float
    loss: float


@dataclass
class TrainingResult:
    mode: TrainingMode
    node_snapshots: list
    curve: list = field(default_factory=list)
    sink_events: list = field(default_factory=list)

    @property
    def snapshot(self) -> ParamSnapshot:
        """The single model of the run: the federated aggregate of all nodes."""
        return fedavg(self.node_snapshots)


def train(config: TrainConfig, scenario: Scenario, mode=TrainingMode.COORDINATED, seed: int = 0,
          channel: ChannelParams | None = None, sink_config: SinkConfig | None = None) -> TrainingResult:
    """
    Train one DRQN agent per node of the scenario's subnet.

    Random streams for the environment, exploration and replay sampling are
    spawned from seed, so two calls with the same arguments give identical curves.
    """
    mode = TrainingMode.parse(mode)
    channel = channel or ChannelParams()
    env_seed, act_seed, replay_seed = np.random.SeedSequence(seed).spawn(3)
    env = NetworkEnv.from_scenario(scenario, channel, seed=env_seed)
    act_rng = np.random.default_rng(act_seed)
    replay_rng = np.random.default_rng(replay_seed)

    base = init_params(seed)
    agents = [DrqnAgent(f"node{i}", base, config) for i in range(env.n)]
    sink = None
    if mode is TrainingMode.COORDINATED:
        sink_config = sink_config or SinkConfig()
        sink = SinkNode(sink_config)

    logger.info("Training %d %s agents for %d episodes (objective %s, epsilon_fail %.3f, seed %s)",
                env.n, mode.value, config.total_episodes, scenario.objective.value, scenario.epsilon_fail, seed)

    curve = []
    rewards_acc, losses_acc = [], []
    for e in range(config.total_episodes):
        eps = epsilon(e, config)
        policy = RecurrentQPolicy([a.online for a in agents], eps, act_rng)
        trace = run_episode(env, policy)

        for i, agent in enumerate(agents):
            if trace.failed[i]:
                continue
            rewards = trace.rewards if mode is TrainingMode.COORDINATED else trace.node_rewards[:, i]
            agent.remember(EpisodeSample(trace.observations[:, i], trace.actions[:, i], rewards))

        for agent in agents:
            try:
                loss = agent.learn(replay_rng)
            except NumericalError as err:
                raise NumericalError(f"training diverged at episode {e} for {agent.agent_id}: {err}") from err
            if loss is not None:
                losses_acc.append(loss)

        done = e + 1
        for agent in agents:
            agent.sync_target(done)

        if sink is not None:
            sink.sync(agents, done)
            for row, acts in zip(trace.success, trace.actions):
                sink.observe(row, acts > 0)
            sink.restore(agents, ~trace.failed, done)

        rewards_acc.append(trace.mean_reward)
        if done % config.curve_every == 0:
            point = CurvePoint(
                episode=done,
                epsilon=eps,
                mean_reward=float(np.mean(rewards_acc)),
                loss=float(np.mean(losses_acc)) if losses_acc else float("nan"),
            )
            curve.append(point)
            logger.info("episode %d eps %.3f mean reward %.4f loss %.6f",
                        point.episode, point.epsilon, point.mean_reward, point.loss)
            rewards_acc, losses_acc = [], []

    return TrainingResult(
        mode=mode,
        node_snapshots=[a.snapshot(config.total_episodes) for a in agents],
        curve=curve,
        sink_events=list(sink.events) if sink is not None else [],
    )
