import numpy as np
import pytest

from conftest import TINY_ARCH
from drl_agent import (DrqnAgent, EpisodeSample, RecurrentQPolicy, ReplayBuffer, TrainConfig, TrainingMode, epsilon,
                       select_action, td_target, train, train_step, update_target)
from federation import ParamSnapshot, SinkConfig
from neural import AdamState, QNetParams, flatten, init_params, unroll
from sim_env import Scenario

TINY_TRAIN = TrainConfig(total_episodes=4, batch_size=2, buffer_capacity=4, target_update_period=2,
                         epsilon_decay_episodes=4, curve_every=2)
TINY_SCENARIO = Scenario(n=2, slots=5, runs=1)


def _sample(value: float, slots: int = 3, obs_dim: int = 12) -> EpisodeSample:
    return EpisodeSample(observations=np.full((slots, obs_dim), value),
                         actions=np.zeros(slots, dtype=int),
                         rewards=np.full(slots, value))


@pytest.mark.parametrize("episode, expected", [
    (0, 1.0),
    (75_000, 0.525),
    (150_000, 0.05),
    (299_999, 0.05),
])
def test_epsilon_schedule(episode, expected):
    assert epsilon(episode) == pytest.approx(expected)


def test_epsilon_rejects_negative_episode():
    with pytest.raises(ValueError):
        epsilon(-1)


def test_select_action_greedy_and_ties(rng):
    assert select_action([0, 0, 0, 5, 0, 0, 0], 0.0, rng) == 3
    assert select_action([1, 1, 0, 0, 0, 0, 0], 0.0, rng) == 0


def test_select_action_uniform_when_exploring(rng):
    draws = np.array([select_action(np.zeros(7), 1.0, rng) for _ in range(70_000)])
    freq = np.bincount(draws, minlength=7) / draws.size
    assert freq == pytest.approx(np.full(7, 1 / 7), abs=0.01)


@pytest.mark.parametrize("reward, max_next, done, gamma, expected", [
    (3.0, 10.0, True, 0.99, 3.0),
    (2.0, 10.0, False, 0.0, 2.0),
    (0.0, 1.0, False, 0.99, 0.99),
])
def test_td_target(reward, max_next, done, gamma, expected):
    assert td_target(reward, max_next, done, gamma) == pytest.approx(expected)


def test_replay_buffer_evicts_oldest():
    buf = ReplayBuffer(2)
    for v in (1.0, 2.0, 3.0):
        buf.push(_sample(v))
    assert len(buf) == 2
    assert buf.oldest().rewards[0] == 2.0


def test_replay_sampling_without_replacement(rng):
    buf = ReplayBuffer(10)
    for v in range(10):
        buf.push(_sample(float(v)))
    batch = buf.sample(10, rng)
    assert sorted(s.rewards[0] for s in batch) == list(range(10))


def test_train_step_underfilled_buffer(rng):
    config = TrainConfig(batch_size=32, buffer_capacity=100)
    buf = ReplayBuffer(100)
    for _ in range(31):
        buf.push(_sample(0.0))
    params = init_params(0)
    assert train_step(params, params, buf, config, AdamState.zeros(params.arch.param_count), rng) is None


def test_train_step_zero_error_keeps_params(rng):
    config = TrainConfig(batch_size=2, buffer_capacity=2)
    buf = ReplayBuffer(2)
    buf.push(_sample(0.0))
    buf.push(_sample(0.0))
    zeros = QNetParams.zeros()
    result = train_step(zeros, zeros, buf, config, AdamState.zeros(zeros.arch.param_count), rng)
    assert result.loss == 0.0
    assert np.array_equal(flatten(result.params), flatten(zeros))


def test_train_step_learns_rewarded_action(rng):
    """Single-slot episodes, reward 1 only for action 1: the greedy choice converges to it."""
    obs = np.ones((1, TINY_ARCH.obs_dim))
    config = TrainConfig(batch_size=3, buffer_capacity=3, learning_rate=1e-2)
    buf = ReplayBuffer(3)
    for a in range(TINY_ARCH.n_actions):
        buf.push(EpisodeSample(observations=obs, actions=np.array([a]), rewards=np.array([float(a == 1)])))

    online = init_params(0, TINY_ARCH)
    target = online.copy()
    adam = AdamState.zeros(TINY_ARCH.param_count)
    for _ in range(2000):
        result = train_step(online, target, buf, config, adam, rng)
        online, adam = result.params, result.adam
    q, _ = unroll(online, obs[:, None, :])
    assert int(np.argmax(q[0, 0])) == 1
    assert q[0, 0, 1] == pytest.approx(1.0, abs=0.05)


def test_update_target_period():
    online, target = init_params(1), init_params(2)
    assert update_target(online, target, 199, 200) is target
    synced = update_target(online, target, 200, 200)
    assert np.array_equal(flatten(synced), flatten(online))
    assert update_target(online, target, 0, 200) is target


def test_agent_snapshot_round_trip():
    agent = DrqnAgent("node0", init_params(4), TINY_TRAIN)
    snap = agent.snapshot(12)
    assert snap.agent_id == "node0" and snap.episode == 12
    other = DrqnAgent("node1", init_params(5), TINY_TRAIN)
    other.load_snapshot(snap)
    assert other.snapshot(12).same_parameters(snap)


def test_recurrent_policy_checks_node_count():
    policy = RecurrentQPolicy([init_params(0)])
    with pytest.raises(ValueError):
        policy.begin_episode(2)


def test_training_mode_aliases():
    assert TrainingMode.parse("uhpnf") is TrainingMode.COORDINATED
    assert TrainingMode.parse("IQL") is TrainingMode.IQL
    with pytest.raises(ValueError):
        TrainingMode.parse("ppo")


def test_zero_episodes_returns_initialisation():
    config = TrainConfig(total_episodes=0)
    result = train(config, TINY_SCENARIO, seed=9)
    init = ParamSnapshot.from_params(init_params(9))
    assert result.curve == []
    assert all(s.same_parameters(init) for s in result.node_snapshots)
    assert result.snapshot.same_parameters(init)


def test_training_is_deterministic():
    a = train(TINY_TRAIN, TINY_SCENARIO, seed=3, sink_config=SinkConfig(sync_period=2))
    b = train(TINY_TRAIN, TINY_SCENARIO, seed=3, sink_config=SinkConfig(sync_period=2))
    assert a.curve == b.curve
    assert a.snapshot.checksum == b.snapshot.checksum


def test_coordinated_training_ends_synchronised():
    result = train(TINY_TRAIN, TINY_SCENARIO, mode="uhpnf", seed=1, sink_config=SinkConfig(sync_period=2))
    assert [e.episode for e in result.sink_events if e.reason == "sync"] == [2, 4]
    assert len({s.checksum for s in result.node_snapshots}) == 1
    assert [p.episode for p in result.curve] == [2, 4]
    assert np.isfinite(result.curve[-1].loss)


def test_iql_training_keeps_agents_independent():
    result = train(TINY_TRAIN, TINY_SCENARIO, mode=TrainingMode.IQL, seed=1)
    assert result.sink_events == []
    assert len({s.checksum for s in result.node_snapshots}) == 2


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=64, buffer_capacity=32)
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainConfig(epsilon_start=0.01, epsilon_end=0.05)
