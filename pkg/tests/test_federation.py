import logging
import struct

import numpy as np
import pytest

from acoustic_channel import ChannelParams
from federation import (FORMAT_VERSION, MAGIC, ArchitectureMismatchError, BadMagicError, ChecksumError,
                        ParamSnapshot, SinkConfig, SinkNode, SnapshotLengthError, UnsupportedVersionError,
                        dead_links, deserialize, detect_and_restore, fedavg, load_snapshot, save_snapshot,
                        serialize, sink_round)
from neural import Architecture, flatten, init_params
from sim_env import NetworkEnv, Scenario

UNIT = Architecture(1, 1, 1, 1)  # 13 parameters


def _snap(values, agent_id="a", dims=UNIT.dims) -> ParamSnapshot:
    return ParamSnapshot(dims=dims, vector=np.asarray(values, dtype=np.float32), agent_id=agent_id)


def _alternating(a, b):
    v = np.empty(UNIT.param_count, dtype=np.float32)
    v[0::2], v[1::2] = a, b
    return v


class FakeAgent:
    def __init__(self, agent_id, values):
        self.agent_id = agent_id
        self.current = _snap(values, agent_id)
        self.loaded = []

    def snapshot(self, episode):
        return self.current

    def load_snapshot(self, snapshot):
        self.current = snapshot
        self.loaded.append(snapshot)


def test_fedavg_arithmetic_mean():
    out = fedavg([_snap(_alternating(1, 3)), _snap(_alternating(3, 5))])
    assert np.array_equal(out.vector, _alternating(2, 4))


def test_fedavg_identical_inputs():
    s = _snap(np.linspace(-1, 1, UNIT.param_count))
    assert fedavg([s, s]).same_parameters(s)
    assert fedavg([s]).same_parameters(s)


def test_fedavg_zero_weight_returns_first():
    a = _snap(np.random.default_rng(0).normal(size=UNIT.param_count))
    b = _snap(np.random.default_rng(1).normal(size=UNIT.param_count))
    assert fedavg([a, b], weights=[1, 0]).same_parameters(a)


def test_fedavg_permutation_invariant(rng):
    snaps = [_snap(rng.normal(size=UNIT.param_count), f"n{i}") for i in range(4)]
    weights = [0.1, 0.2, 0.3, 0.4]
    order = [2, 0, 3, 1]
    a = fedavg(snaps, weights)
    b = fedavg([snaps[i] for i in order], [weights[i] for i in order])
    assert a.vector.tobytes() == b.vector.tobytes()
    assert a.sources == b.sources


def test_fedavg_errors():
    s = _snap(np.zeros(UNIT.param_count))
    with pytest.raises(ValueError):
        fedavg([])
    with pytest.raises(ValueError):
        fedavg([s, s], weights=[0, 0])
    with pytest.raises(ValueError):
        fedavg([s, s], weights=[1])
    other = ParamSnapshot(dims=(2, 1, 1, 1), vector=np.zeros(Architecture(2, 1, 1, 1).param_count))
    with pytest.raises(ArchitectureMismatchError):
        fedavg([s, other])


def test_snapshot_length_must_match_architecture():
    with pytest.raises(SnapshotLengthError):
        _snap(np.zeros(12))


def test_wire_layout():
    s = _snap(np.arange(UNIT.param_count))
    data = serialize(s)
    assert data[:4] == MAGIC
    assert struct.unpack_from("<II", data, 4) == (FORMAT_VERSION, 4)
    assert struct.unpack_from("<4I", data, 12) == UNIT.dims
    assert len(data) == 4 + 4 + 4 + 16 + 4 * UNIT.param_count + 4
    assert struct.unpack_from("<I", data, len(data) - 4)[0] == s.checksum


def test_round_trip_random_snapshots(rng):
    for _ in range(100):
        s = _snap(rng.normal(size=UNIT.param_count).astype(np.float32))
        back = deserialize(serialize(s))
        assert back.vector.tobytes() == s.vector.tobytes()
        assert back.checksum == s.checksum


def test_every_payload_byte_corruption_is_detected():
    data = bytearray(serialize(_snap(np.ones(UNIT.param_count))))
    for i in range(28, len(data) - 4):
        corrupted = bytearray(data)
        corrupted[i] ^= 0x01
        with pytest.raises(ChecksumError):
            deserialize(bytes(corrupted))


def test_header_errors():
    data = serialize(_snap(np.ones(UNIT.param_count)))
    with pytest.raises(BadMagicError):
        deserialize(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        deserialize(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(SnapshotLengthError):
        deserialize(data[:-10])
    with pytest.raises(SnapshotLengthError):
        deserialize(data[:6])
    with pytest.raises(ArchitectureMismatchError):
        deserialize(data[:12] + struct.pack("<4I", 0, 1, 1, 1) + data[28:])


def test_default_architecture_snapshot_file(tmp_path):
    s = ParamSnapshot.from_params(init_params(0), agent_id="node0", episode=7)
    path = save_snapshot(tmp_path / "model.uhpf", s)
    back = load_snapshot(path)
    assert back.same_parameters(s)
    assert np.array_equal(back.vector, flatten(init_params(0)).astype(np.float32))


def test_sink_round_synchronises_members():
    agents = [FakeAgent("a", _alternating(1, 3)), FakeAgent("b", _alternating(3, 5))]
    event = sink_round(agents, 100, SinkConfig(sync_period=100))
    assert event.recipients == ("a", "b")
    assert agents[0].current.same_parameters(agents[1].current)
    assert np.array_equal(agents[0].current.vector, _alternating(2, 4))


def test_sink_round_identical_members():
    agents = [FakeAgent("a", np.ones(UNIT.param_count)), FakeAgent("b", np.ones(UNIT.param_count))]
    event = sink_round(agents, 200, SinkConfig(sync_period=100))
    assert event.snapshot.same_parameters(_snap(np.ones(UNIT.param_count)))


def test_sink_round_off_period_is_noop():
    agents = [FakeAgent("a", np.ones(UNIT.param_count))]
    assert sink_round(agents, 150, SinkConfig(sync_period=100)) is None
    assert agents[0].loaded == []


def test_sink_round_missing_member(caplog):
    agents = [FakeAgent("a", np.ones(UNIT.param_count))]
    with caplog.at_level(logging.WARNING):
        assert sink_round(agents, 100, SinkConfig(members={"a", "b"})) is None
    assert "not registered" in caplog.text


def _window(dead_node=None, rows=10, n=5):
    window = np.ones((rows, n))
    if dead_node is not None:
        window[:, dead_node] = 0.0
    return list(window)


def test_dead_links():
    assert dead_links(_window(), 0.1, 0.5) == []
    assert dead_links(_window(dead_node=2), 0.1, 0.5) == [2]
    # subnet mean too low: no single link is singled out
    assert dead_links(np.zeros((10, 5)), 0.1, 0.5) == []


def test_detect_and_restore():
    latest = _snap(np.ones(UNIT.param_count), "fedavg")
    agents = [FakeAgent(f"n{i}", np.zeros(UNIT.param_count)) for i in range(5)]
    healthy = np.array([True, True, False, True, True])
    config = SinkConfig()

    assert detect_and_restore(_window(), latest, agents, healthy, config) is None
    assert detect_and_restore(_window(dead_node=2, rows=9), latest, agents, healthy, config) is None
    assert detect_and_restore(_window(dead_node=2), None, agents, healthy, config) is None

    event = detect_and_restore(_window(dead_node=2), latest, agents, healthy, config, episode=40)
    assert event.reason == "restore"
    assert event.recipients == ("n0", "n1", "n3", "n4")
    assert agents[2].loaded == []
    assert all(a.current is latest for i, a in enumerate(agents) if i != 2)


def test_sink_node_tracks_events():
    sink = SinkNode(SinkConfig(sync_period=1))
    agents = [FakeAgent(f"n{i}", np.full(UNIT.param_count, float(i))) for i in range(5)]
    sink.sync(agents, 1)
    for row in _window(dead_node=0):
        sink.observe(row)
    event = sink.restore(agents, np.ones(5, dtype=bool), 1)
    assert event is not None
    assert [e.reason for e in sink.events] == ["sync", "restore"]
    assert len(sink.window) == 0


def test_non_responsive_sink_never_restores():
    sink = SinkNode(SinkConfig(sync_period=1, responsive=False))
    agents = [FakeAgent("n0", np.ones(UNIT.param_count))]
    sink.sync(agents, 1)
    for row in _window(dead_node=0, n=1):
        sink.observe(row)
    assert sink.restore(agents, np.ones(1, dtype=bool), 1) is None


def test_dead_links_ignore_deliberate_silence():
    success = np.tile([0.0, 0.0, 1.0, 1.0, 1.0], (10, 1))
    transmitted = np.tile([0.0, 0.0, 1.0, 1.0, 1.0], (10, 1))
    assert dead_links(success, 0.1, 0.5) == [0, 1]
    assert dead_links(success, 0.1, 0.5, transmitted) == []


def test_dead_links_rate_counts_only_transmitting_slots():
    success = np.ones((10, 3))
    success[:, 0] = 0.0
    transmitted = np.ones((10, 3))
    transmitted[5:, 0] = 0.0
    assert dead_links(success, 0.1, 0.5, transmitted) == [0]
    with pytest.raises(ValueError):
        dead_links(success, 0.1, 0.5, transmitted[:, :2])


def test_optimal_joint_action_without_failures_keeps_training_state():
    # two nodes silent on purpose, three clean links
    env = NetworkEnv.from_scenario(Scenario(n=5), ChannelParams())
    env.reset(0)
    sink = SinkNode(SinkConfig(sync_period=1))
    agents = [FakeAgent(f"node{i}", np.full(UNIT.param_count, float(i))) for i in range(5)]
    sink.sync(agents, 1)
    drifted = _snap(np.full(UNIT.param_count, 9.0), "node0")
    agents[0].current = drifted

    for _ in range(10):
        metrics = env.step([0, 0, 3, 2, 1]).metrics
        sink.observe(metrics.success, metrics.actions > 0)

    assert not env.failures.failed.any()
    assert metrics.success.tolist() == [False, False, True, True, True]
    assert sink.restore(agents, ~env.failures.failed, 1) is None
    assert agents[0].current is drifted
    assert [e.reason for e in sink.events] == ["sync"]


def test_transmitting_dead_link_still_triggers_restore():
    sink = SinkNode(SinkConfig(sync_period=1))
    agents = [FakeAgent(f"n{i}", np.full(UNIT.param_count, float(i))) for i in range(3)]
    sink.sync(agents, 1)
    for _ in range(10):
        sink.observe([0, 1, 1], [1, 1, 1])
    event = sink.restore(agents, np.ones(3, dtype=bool), 2)
    assert event is not None and event.reason == "restore"
    assert len(sink.attempts) == 0
