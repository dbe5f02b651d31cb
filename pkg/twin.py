# twin.py
"""
Aggregation-layer digital twin.

The twin is an offline, seeded re-simulation: evaluate a model on a scenario,
keep one trained model per objective in a registry, run what-if cross products
and compose per-subnet models into one network policy table.
"""

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from acoustic_channel import ChannelParams
from drl_agent import RecurrentQPolicy
from federation import (MAGIC, ArchitectureMismatchError, BadMagicError, ChecksumError, ParamSnapshot, deserialize,
                        load_snapshot, save_snapshot, serialize)
from sim_env import N_ACTIONS, OBS_DIM, NetworkEnv, Objective, Scenario, run_episode
from utils import atomic_write_text

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class UnknownObjectiveError(KeyError):
    pass


class PartitionError(ValueError):
    pass


# ---------------------------
# Joint policies
# ---------------------------

@dataclass(frozen=True)
class SubnetAssignment:
    nodes: tuple
    snapshot: ParamSnapshot


@dataclass(frozen=True)
class NetworkPolicy:
    """node id -> snapshot checksum, plus the snapshots themselves keyed by checksum."""
    table: dict
    snapshots: dict

    @property
    def n(self) -> int:
        return len(self.table)

    @classmethod
    def shared(cls, snapshot: ParamSnapshot, n: int) -> "NetworkPolicy":
        key = snapshot.checksum_hex
        return cls(table={i: key for i in range(n)}, snapshots={key: snapshot})

    def snapshot_for(self, node: int) -> ParamSnapshot:
        return self.snapshots[self.table[node]]

    @property
    def checksum_hex(self) -> str:
        if len(self.snapshots) == 1:
            return next(iter(self.snapshots))
        text = ",".join(f"{node}:{self.table[node]}" for node in sorted(self.table))
        return f"{zlib.crc32(text.encode()) & 0xFFFFFFFF:08x}"

    def to_manifest(self) -> dict:
        return {"table": {str(k): v for k, v in sorted(self.table.items())}}


def compose_joint_policy(assignments: Mapping[str, SubnetAssignment], n: int | None = None) -> NetworkPolicy:
    """
    Combine per-subnet models into one network policy. The subnets must
    partition the node set {0, ..., n-1}.
    """
    if not assignments:
        raise PartitionError("no subnets given")
    owner = {}
    for subnet, assignment in assignments.items():
        for node in assignment.nodes:
            node = int(node)
            if node in owner:
                raise PartitionError(f"node {node} belongs to both {owner[node]!r} and {subnet!r}")
            owner[node] = subnet

    n = len(owner) if n is None else n
    missing = sorted(set(range(n)) - owner.keys())
    extra = sorted(owner.keys() - set(range(n)))
    if missing or extra:
        raise PartitionError(f"subnets do not cover nodes 0..{n - 1}: missing {missing}, unknown {extra}")

    snapshots = {a.snapshot.checksum_hex: a.snapshot for a in assignments.values()}
    table = {node: assignments[subnet].snapshot.checksum_hex for node, subnet in sorted(owner.items())}
    return NetworkPolicy(table=table, snapshots=snapshots)


def save_joint_policy(path, policy: NetworkPolicy) -> Path:
    """Write each distinct snapshot next to path and a JSON manifest at path."""
    path = Path(path)
    files = {}
    for key, snap in sorted(policy.snapshots.items()):
        name = f"{path.stem}.{key}.uhpf"
        save_snapshot(path.parent / name, snap)
        files[key] = name
    manifest = {**policy.to_manifest(), "files": files}
    return atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path):
    """A UHPF file gives a single shared snapshot; anything else is read as a joint-policy manifest."""
    path = Path(path)
    data = path.read_bytes()
    if data[:len(MAGIC)] == MAGIC:
        return deserialize(data)
    try:
        manifest = json.loads(data.decode("utf-8"))
        table = {int(k): v for k, v in manifest["table"].items()}
        files = manifest["files"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise BadMagicError(f"{path} is neither a UHPF snapshot nor a joint-policy manifest: {e}") from e

    snapshots = {}
    for key, name in files.items():
        snap = load_snapshot(path.parent / name)
        if snap.checksum_hex != key:
            raise ChecksumError(f"{name}: checksum {snap.checksum_hex} does not match manifest entry {key}")
        snapshots[key] = snap
    return NetworkPolicy(table=table, snapshots=snapshots)


def as_network_policy(model, n: int) -> NetworkPolicy:
    if isinstance(model, NetworkPolicy):
        if model.n != n:
            raise PartitionError(f"joint policy covers {model.n} nodes, scenario has {n}")
        return model
    return NetworkPolicy.shared(model, n)


def _check_architecture(snapshot: ParamSnapshot):
    arch = snapshot.arch
    if arch.obs_dim != OBS_DIM or arch.n_actions != N_ACTIONS:
        raise ArchitectureMismatchError(
            f"snapshot expects {arch.obs_dim} observations / {arch.n_actions} actions, "
            f"environment provides {OBS_DIM} / {N_ACTIONS}")


# ---------------------------
# Evaluation
# ---------------------------

@dataclass(frozen=True)
class EvaluationMetrics:
    model: str
    scenario: Scenario
    checksum: str
    concurrent: np.ndarray      # per-run mean concurrent count
    capacity_kb: np.ndarray     # per-run total capacity
    fairness: np.ndarray        # per-run Jain index of delivered bits

    def mean(self, metric: str) -> float:
        return float(np.mean(getattr(self, metric)))

    def std(self, metric: str) -> float:
        return float(np.std(getattr(self, metric)))

    def objective_value(self, objective: Objective) -> float:
        return self.mean({
            Objective.MAX_CONCURRENT: "concurrent",
            Objective.MAX_CAPACITY: "capacity_kb",
            Objective.MAX_FAIRNESS: "fairness",
        }[objective])

    def to_row(self) -> dict:
        s = self.scenario
        return {
            "model": self.model,
            "checksum": self.checksum,
            "n": s.n,
            "epsilon_fail": s.epsilon_fail,
            "objective": s.objective.value,
            "placement": s.placement,
            "seed": s.seed,
            "runs": s.runs,
            "mean_concurrent": self.mean("concurrent"),
            "std_concurrent": self.std("concurrent"),
            "capacity_kb": self.mean("capacity_kb"),
            "std_capacity_kb": self.std("capacity_kb"),
            "fairness": self.mean("fairness"),
            "std_fairness": self.std("fairness"),
        }


def evaluate_policy(policy, scenario: Scenario, channel: ChannelParams | None = None,
                    label: str = "policy", checksum: str = "-") -> EvaluationMetrics:
    """
    Run scenario.runs independent episodes; run r is seeded with (scenario.seed, r).
    """
    channel = channel or ChannelParams()
    env = NetworkEnv.from_scenario(scenario, channel)
    concurrent, capacity, fairness = [], [], []
    for r in range(scenario.runs):
        trace = run_episode(env, policy, seed=[scenario.seed, r])
        concurrent.append(trace.mean_concurrent)
        capacity.append(trace.capacity_kb)
        fairness.append(trace.fairness)
    return EvaluationMetrics(
        model=label,
        scenario=scenario,
        checksum=checksum,
        concurrent=np.array(concurrent),
        capacity_kb=np.array(capacity),
        fairness=np.array(fairness),
    )


def evaluate(model, scenario: Scenario, channel: ChannelParams | None = None, label: str = "model") -> EvaluationMetrics:
    """Greedy (epsilon = 0) evaluation of a snapshot or joint policy; failed nodes still act randomly."""
    policy = as_network_policy(model, scenario.n)
    for snap in policy.snapshots.values():
        _check_architecture(snap)
    params = {key: snap.to_params() for key, snap in policy.snapshots.items()}
    q_policy = RecurrentQPolicy([params[policy.table[i]] for i in range(scenario.n)], eps=0.0)
    return evaluate_policy(q_policy, scenario, channel, label=label, checksum=policy.checksum_hex)


# ---------------------------
# Model registry
# ---------------------------

@dataclass
class ModelRegistry:
    """At most one active snapshot per objective."""
    entries: dict = field(default_factory=dict)

    def register(self, objective, snapshot: ParamSnapshot, expected_checksum: str | None = None) -> None:
        objective = Objective.parse(objective)
        _check_architecture(snapshot)
        if expected_checksum is not None and snapshot.checksum_hex != expected_checksum:
            raise ChecksumError(f"snapshot checksum {snapshot.checksum_hex} != expected {expected_checksum}")
        if objective in self.entries:
            logger.info("Replacing %s model %s with %s", objective.value,
                        self.entries[objective].checksum_hex, snapshot.checksum_hex)
        self.entries[objective] = snapshot

    def __contains__(self, objective) -> bool:
        try:
            return Objective.parse(objective) in self.entries
        except ValueError:
            return False

    def objectives(self) -> list[Objective]:
        return sorted(self.entries, key=lambda o: o.value)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = []
        for objective in self.objectives():
            snap = self.entries[objective]
            name = f"{objective.value}.uhpf"
            save_snapshot(directory / name, snap)
            manifest.append({
                "objective": objective.value,
                "file": name,
                "checksum": snap.checksum_hex,
                "agent_id": snap.agent_id,
                "episode": snap.episode,
            })
        out = atomic_write_text(directory / MANIFEST_NAME, json.dumps(manifest, indent=2) + "\n")
        logger.info("Saved registry with %d models to %s", len(manifest), directory)
        return out

    @classmethod
    def load(cls, directory) -> "ModelRegistry":
        directory = Path(directory)
        with open(directory / MANIFEST_NAME, encoding="utf-8") as fh:
            manifest = json.load(fh)
        registry = cls()
        for entry in manifest:
            snap = load_snapshot(directory / entry["file"])
            snap = ParamSnapshot(dims=snap.dims, vector=snap.vector,
                                 agent_id=entry.get("agent_id", ""), episode=int(entry.get("episode", 0)))
            registry.register(entry["objective"], snap, expected_checksum=entry["checksum"])
        return registry


def select_model(objective, registry: ModelRegistry) -> ParamSnapshot:
    try:
        key = Objective.parse(objective)
    except ValueError as e:
        raise UnknownObjectiveError(str(objective)) from e
    if key not in registry.entries:
        raise UnknownObjectiveError(f"no model registered for objective {key.value!r}")
    return registry.entries[key]


# ---------------------------
# What-if analysis
# ---------------------------

@dataclass
class WhatIfReport:
    cells: list

    def for_scenario(self, scenario: Scenario) -> list[EvaluationMetrics]:
        return [c for c in self.cells if c.scenario == scenario]

    def best(self, scenario: Scenario) -> EvaluationMetrics:
        return self.for_scenario(scenario)[0]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.to_row() for c in self.cells])


def _rank(cells: list[EvaluationMetrics], scenarios: Sequence[Scenario]) -> list[EvaluationMetrics]:
    ranked = []
    for scenario in scenarios:
        group = [c for c in cells if c.scenario == scenario]
        group.sort(key=lambda c: (-c.objective_value(scenario.objective), c.model))
        ranked.extend(group)
    return ranked


def _scenario_to_dict(scenario: Scenario) -> dict:
    d = asdict(scenario)
    d["objective"] = scenario.objective.value
    return d


def evaluate_cell_job(name: str, node_models: list, scenario: dict, channel: dict) -> dict:
    """Queue entry point: plain bytes and dicts in, plain dict out."""
    snapshots = [deserialize(b) for b in node_models]
    assignments = {str(i): SubnetAssignment(nodes=(i,), snapshot=s) for i, s in enumerate(snapshots)}
    policy = compose_joint_policy(assignments, len(snapshots))
    m = evaluate(policy, Scenario(**scenario), ChannelParams(**channel), label=name)
    return {
        "checksum": m.checksum,
        "concurrent": m.concurrent.tolist(),
        "capacity_kb": m.capacity_kb.tolist(),
        "fairness": m.fairness.tolist(),
    }


def _wait_for(jobs, timeout: float, poll: float = 1.0) -> list:
    deadline = time.monotonic() + timeout
    results = []
    for job in jobs:
        while True:
            status = job.get_status()
            if status == "finished":
                results.append(job.return_value())
                break
            if status in ("failed", "canceled", "stopped"):
                raise RuntimeError(f"what-if job {job.id} {status}")
            if time.monotonic() > deadline:
                raise TimeoutError(f"what-if job {job.id} still {status} after {timeout}s")
            time.sleep(poll)
    return results


def what_if(models, scenarios: Sequence[Scenario], channel: ChannelParams | None = None,
            queue=None, timeout: float = 3600.0) -> WhatIfReport:
    """
    Evaluate every (scenario, model) cell and rank the models within each scenario
    by that scenario's objective. With an RQ queue the cells run on workers.
    """
    named = list(models.items()) if isinstance(models, Mapping) else list(models)
    if not named or not scenarios:
        raise ValueError("what_if needs at least one model and one scenario")
    channel = channel or ChannelParams()

    if queue is None:
        cells = [evaluate(model, s, channel, label=name) for s in scenarios for name, model in named]
        return WhatIfReport(cells=_rank(cells, scenarios))

    pending = []
    for s in scenarios:
        for name, model in named:
            policy = as_network_policy(model, s.n)
            node_models = [serialize(policy.snapshot_for(i)) for i in range(s.n)]
            job = queue.enqueue(evaluate_cell_job, name, node_models, _scenario_to_dict(s), asdict(channel))
            pending.append((name, s, job))
    logger.info("Enqueued %d what-if cells on %s", len(pending), queue.name)

    results = _wait_for([job for _, _, job in pending], timeout)
    cells = [
        EvaluationMetrics(model=name, scenario=s, checksum=res["checksum"],
                          concurrent=np.array(res["concurrent"]),
                          capacity_kb=np.array(res["capacity_kb"]),
                          fairness=np.array(res["fairness"]))
        for (name, s, _), res in zip(pending, results)
    ]
    return WhatIfReport(cells=_rank(cells, scenarios))
