# federation.py
"""
Sink-layer parameter exchange.

Only parameter vectors travel between layers, packed in the UHPF wire format:

    magic "UHPF" | version u32 | layer count u32 | dims u32 * count |
    payload float32 * param_count | CRC32 of everything before it

All integers and floats are little-endian. Snapshot files on disk use the same bytes.
"""

import logging
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from neural import Architecture, QNetParams, flatten, unflatten
from utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"UHPF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


class SnapshotError(ValueError):
    pass


class BadMagicError(SnapshotError):
    pass


class UnsupportedVersionError(SnapshotError):
    pass


class SnapshotLengthError(SnapshotError):
    pass


class ChecksumError(SnapshotError):
    pass


class ArchitectureMismatchError(SnapshotError):
    pass


@dataclass(frozen=True, eq=False)
class ParamSnapshot:
    dims: tuple
    vector: np.ndarray
    agent_id: str = ""
    episode: int = 0
    sources: tuple = ()
    version: int = FORMAT_VERSION

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vec = np.ascontiguousarray(np.asarray(self.vector, dtype="<f4").ravel())
        vec.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "vector", vec)
        expected = Architecture.from_dims(dims).param_count
        if vec.size != expected:
            raise SnapshotLengthError(f"vector has {vec.size} values, architecture {dims} needs {expected}")

    @property
    def arch(self) -> Architecture:
        return Architecture.from_dims(self.dims)

    def _body(self) -> bytes:
        header = _HEADER.pack(MAGIC, self.version, len(self.dims))
        header += struct.pack(f"<{len(self.dims)}I", *self.dims)
        return header + self.vector.tobytes()

    @property
    def checksum(self) -> int:
        return zlib.crc32(self._body()) & 0xFFFFFFFF

    @property
    def checksum_hex(self) -> str:
        return f"{self.checksum:08x}"

    @classmethod
    def from_params(cls, params: QNetParams, agent_id: str = "", episode: int = 0) -> "ParamSnapshot":
        return cls(dims=params.arch.dims, vector=flatten(params), agent_id=agent_id, episode=episode)

    def to_params(self) -> QNetParams:
        return unflatten(self.vector.astype(np.float64), self.arch)

    def same_parameters(self, other: "ParamSnapshot") -> bool:
        return self.dims == other.dims and self.vector.tobytes() == other.vector.tobytes()


def serialize(snapshot: ParamSnapshot) -> bytes:
    body = snapshot._body()
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def deserialize(data: bytes) -> ParamSnapshot:
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise SnapshotLengthError(f"stream too short for a header: {len(data)} bytes")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")

    dims_end = _HEADER.size + 4 * count
    if len(data) < dims_end + _U32.size:
        raise SnapshotLengthError(f"stream truncated inside the layer table ({len(data)} bytes)")
    dims = struct.unpack_from(f"<{count}I", data, _HEADER.size)
    try:
        arch = Architecture.from_dims(dims)
    except ValueError as e:
        raise ArchitectureMismatchError(str(e)) from e

    expected = dims_end + 4 * arch.param_count + _U32.size
    if len(data) != expected:
        raise SnapshotLengthError(f"stream has {len(data)} bytes, layer table {dims} needs {expected}")

    body, (stored,) = data[:-_U32.size], _U32.unpack_from(data, len(data) - _U32.size)
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:08x}")

    vector = np.frombuffer(body, dtype="<f4", offset=dims_end)
    return ParamSnapshot(dims=dims, vector=vector.copy(), version=version)


def save_snapshot(path, snapshot: ParamSnapshot):
    out = atomic_write_bytes(path, serialize(snapshot))
    logger.info("Saved snapshot %s (crc %s) to %s", snapshot.agent_id or "-", snapshot.checksum_hex, out)
    return out


def load_snapshot(path) -> ParamSnapshot:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def fedavg(snapshots: Sequence[ParamSnapshot], weights: Sequence[float] | None = None) -> ParamSnapshot:
    """
    Element-wise weighted mean of parameter vectors, weights normalised to sum 1.
    Inputs are accumulated in a canonical order so the result does not depend on
    how the (snapshot, weight) pairs are listed.
    """
    if not snapshots:
        raise ValueError("fedavg needs at least one snapshot")
    dims = snapshots[0].dims
    for s in snapshots[1:]:
        if s.dims != dims:
            raise ArchitectureMismatchError(f"cannot average architectures {dims} and {s.dims}")

    w = np.ones(len(snapshots)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(snapshots),):
        raise ValueError(f"got {len(snapshots)} snapshots but {w.size} weights")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"weights must be finite and non-negative, got {w}")
    total = float(np.sum(w))
    if total <= 0:
        raise ValueError("weights must not all be zero")

    order = sorted(range(len(snapshots)), key=lambda i: (snapshots[i].vector.tobytes(), w[i]))
    acc = np.zeros(snapshots[0].vector.size)
    for i in order:
        if w[i] > 0:
            acc += w[i] * snapshots[i].vector.astype(np.float64)

    return ParamSnapshot(
        dims=dims,
        vector=(acc / total).astype(np.float32),
        agent_id="fedavg",
        episode=max(s.episode for s in snapshots),
        sources=tuple(sorted(f"{s.agent_id}@{s.episode}:{s.checksum_hex}" for s in snapshots)),
    )


@dataclass(frozen=True)
class SinkConfig:
    sync_period: int = 100
    members: frozenset = field(default_factory=frozenset)
    window: int = 10
    dead_rate: float = 0.1
    healthy_mean: float = 0.5
    responsive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "members", frozenset(self.members))
        if self.sync_period < 1:
            raise ValueError(f"sync_period must be >= 1, got {self.sync_period}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not (0.0 <= self.dead_rate <= 1.0 and 0.0 <= self.healthy_mean <= 1.0):
            raise ValueError(f"dead_rate and healthy_mean must lie in [0, 1], got {self.dead_rate}, {self.healthy_mean}")


class FederatedMember(Protocol):
    agent_id: str

    def snapshot(self, episode: int) -> ParamSnapshot | None: ...

    def load_snapshot(self, snapshot: ParamSnapshot) -> None: ...


@dataclass(frozen=True)
class BroadcastEvent:
    episode: int
    snapshot: ParamSnapshot
    recipients: tuple
    reason: str


def sink_round(agents: Iterable[FederatedMember], episode: int, config: SinkConfig) -> BroadcastEvent | None:
    """
    Every sync_period episodes: collect each member's snapshot, average with equal
    weights and load the aggregate back into every member.
    """
    if episode % config.sync_period != 0:
        return None

    by_id = {a.agent_id: a for a in agents}
    members = sorted(config.members or by_id.keys())
    missing = [m for m in members if m not in by_id]
    if missing:
        logger.warning("Sink round at episode %d skipped: agents %s not registered", episode, missing)
        return None

    snapshots = []
    for m in members:
        snap = by_id[m].snapshot(episode)
        if snap is None:
            logger.warning("Sink round at episode %d skipped: no snapshot from %s", episode, m)
            return None
        snapshots.append(snap)

    aggregate = fedavg(snapshots)
    for m in members:
        by_id[m].load_snapshot(aggregate)
    logger.debug("Sink round at episode %d aggregated %d agents (crc %s)", episode, len(members), aggregate.checksum_hex)
    return BroadcastEvent(episode=episode, snapshot=aggregate, recipients=tuple(members), reason="sync")


def dead_links(window, dead_rate: float, healthy_mean: float, attempts=None) -> list[int]:
    """
    Nodes whose success rate over the slots they transmitted in is below dead_rate
    while the subnet mean stays above healthy_mean. attempts marks the slots each
    node transmitted in (every slot when omitted); a node that stayed silent for
    the whole window is never reported.
    """
    success = np.asarray(window, dtype=float)
    tried = np.ones_like(success) if attempts is None else np.asarray(attempts, dtype=float)
    if tried.shape != success.shape:
        raise ValueError(f"attempts shape {tried.shape} does not match window shape {success.shape}")
    counts = tried.sum(axis=0)
    active = np.flatnonzero(counts > 0)
    if active.size == 0:
        return []
    rates = (success * tried).sum(axis=0)[active] / counts[active]
    if float(np.mean(rates)) <= healthy_mean:
        return []
    return [int(i) for i in active[rates < dead_rate]]


def detect_and_restore(window, latest: ParamSnapshot | None, agents: Sequence[FederatedMember],
                       healthy, config: SinkConfig, episode: int = 0, attempts=None) -> BroadcastEvent | None:
    """
    window holds one per-link success row per slot, attempts the matching rows of
    transmit flags. Once the window is full and a dead link shows up, re-broadcast
    the latest aggregate to every healthy node.
    """
    rows = list(window)
    if len(rows) < config.window:
        return None
    tried = None if attempts is None else list(attempts)[-config.window:]
    dead = dead_links(rows[-config.window:], config.dead_rate, config.healthy_mean, tried)
    if not dead:
        return None
    if latest is None:
        logger.warning("Dead links %s detected but no aggregate to restore yet", dead)
        return None

    recipients = []
    for i, agent in enumerate(agents):
        if healthy[i]:
            agent.load_snapshot(latest)
            recipients.append(agent.agent_id)
    logger.warning("Dead links %s detected at episode %d, re-broadcast to %d healthy nodes",
                   dead, episode, len(recipients))
    return BroadcastEvent(episode=episode, snapshot=latest, recipients=tuple(recipients), reason="restore")


class SinkNode:
    """Surface gateway of one subnet: periodic averaging plus failure-triggered restores."""

    def __init__(self, config: SinkConfig):
        self.config = config
        self.latest: ParamSnapshot | None = None
        self.window = deque(maxlen=config.window)
        self.attempts = deque(maxlen=config.window)
        self.events: list[BroadcastEvent] = []

    def observe(self, success_row, transmitted_row=None) -> None:
        """Record one slot; transmitted_row defaults to every link having transmitted."""
        success = np.asarray(success_row, dtype=float)
        self.window.append(success)
        self.attempts.append(np.ones_like(success) if transmitted_row is None
                             else np.asarray(transmitted_row, dtype=float))

    def sync(self, agents, episode: int) -> BroadcastEvent | None:
        event = sink_round(agents, episode, self.config)
        if event is not None:
            self.latest = event.snapshot
            self.events.append(event)
        return event

    def restore(self, agents, healthy, episode: int) -> BroadcastEvent | None:
        if not self.config.responsive:
            return None
        event = detect_and_restore(self.window, self.latest, agents, healthy, self.config, episode,
                                   attempts=self.attempts)
        if event is not None:
            self.events.append(event)
            self.window.clear()
            self.attempts.clear()
        return event
