#!/usr/bin/env python3
# cli.py
"""
aquamesh command line.

    train             train coordinated (uhpnf) or IQL agents, write snapshot(s) + learning curve
    compare           mean concurrent communications per (policy, failure rate)
    sweep-objectives  capacity and fairness per (model, node count)
    simulate          run a policy and save the per-slot trace
    export            flatten a saved trace into a per-slot CSV
    register          add a snapshot to a model registry directory
    what-if           full (scenario x model) evaluation report
    worker            serve queued what-if cells

Exit codes: 0 ok, 2 usage, 3 configuration, 4 I/O or malformed file, 5 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from acoustic_channel import sinr_db
from baselines import BaselineKind, make_baseline
from drl_agent import RecurrentQPolicy, TrainingMode, train
from federation import SnapshotError, load_snapshot, save_snapshot
from neural import NumericalError
from redis_conn import queue_or_none
from run_config import ConfigError, RunConfig, load_run_config
from sim_env import POWER_LEVELS_W, NetworkEnv, Objective, TraceFormatError, load_trace_arrays, run_episode, save_traces
from twin import (MANIFEST_NAME, ModelRegistry, PartitionError, SubnetAssignment, UnknownObjectiveError,
                  as_network_policy, compose_joint_policy, evaluate, evaluate_policy, load_model,
                  save_joint_policy, what_if)
from utils import parse_float_list, parse_int_list, write_csv
from worker import run_worker

logger = logging.getLogger("aquamesh")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERICAL = 5

COMPARE_COLUMNS = ["policy", "epsilon", "mean_concurrent", "stddev"]
SWEEP_COLUMNS = ["model", "n", "capacity_kb", "fairness"]
EXPORT_COLUMNS = ["run", "slot", "node", "action_W", "sinr_db", "bits", "reward", "concurrent_count"]
CURVE_COLUMNS = ["episode", "epsilon", "mean_reward", "loss"]


class UsageError(Exception):
    pass


# ---------------------------
# Shared helpers
# ---------------------------

def _config(args) -> RunConfig:
    config = load_run_config(args.config)
    try:
        if getattr(args, "seed", None) is not None and args.command != "train":
            config = config.with_("scenario", seed=args.seed)
        if getattr(args, "runs", None) is not None:
            config = config.with_("scenario", runs=args.runs)
        if getattr(args, "n", None) is not None:
            config = config.with_("scenario", n=args.n)
        if getattr(args, "objective", None) is not None:
            config = config.with_("scenario", objective=args.objective)
        if getattr(args, "epsilon_fail", None) is not None:
            config = config.with_("scenario", epsilon_fail=args.epsilon_fail)
        if getattr(args, "episodes", None) is not None:
            config = config.with_("train", total_episodes=args.episodes)
    except ValueError as e:
        raise ConfigError(f"bad command-line override: {e}") from e
    return config


def _parse_models(specs) -> dict:
    """['A=path/a.uhpf', 'B=b.json'] -> {'A': model, 'B': model}"""
    models = {}
    for item in specs or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--model expects NAME=PATH, got {item!r}")
        if name in models:
            raise UsageError(f"model name {name!r} given twice")
        models[name] = load_model(path)
    return models


def _registry_models(directory) -> list:
    """(name, model, objective) for every registered objective."""
    registry = ModelRegistry.load(directory)
    return [(obj.value, registry.entries[obj], obj) for obj in registry.objectives()]


def _evaluate_named(name: str, models: dict, scenario, channel):
    """Evaluate a baseline kind or a named trained model."""
    if name in models:
        return evaluate(models[name], scenario, channel, label=name)
    try:
        kind = BaselineKind(name.lower())
    except ValueError:
        raise UsageError(f"unknown policy {name!r}; use one of greedy, tdma, random or a --model NAME") from None
    if kind is BaselineKind.IQL:
        raise UsageError("policy 'iql' needs a trained model: --model iql=PATH (see train --mode iql)")
    policy = make_baseline(kind, scenario.n, seed=scenario.seed)
    return evaluate_policy(policy, scenario, channel, label=kind.value)


# ---------------------------
# Commands
# ---------------------------

def cmd_train(args) -> int:
    config = _config(args)
    result = train(config.train, config.scenario, mode=args.mode, seed=args.seed,
                   channel=config.channel, sink_config=config.sink)

    out = Path(args.out)
    if result.mode is TrainingMode.IQL:
        assignments = {
            f"node{i}": SubnetAssignment(nodes=(i,), snapshot=snap)
            for i, snap in enumerate(result.node_snapshots)
        }
        save_joint_policy(out, compose_joint_policy(assignments, len(result.node_snapshots)))
    else:
        save_snapshot(out, result.snapshot)

    curve_path = Path(args.curve) if args.curve else out.with_suffix(".curve.csv")
    curve = pd.DataFrame([asdict(p) for p in result.curve], columns=CURVE_COLUMNS)
    write_csv(curve_path, curve)
    logger.info("Training done: %d sink events, model at %s", len(result.sink_events), out)
    return EXIT_OK


def cmd_compare(args) -> int:
    config = _config(args)
    models = _parse_models(args.model)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not policies:
        raise UsageError("--policies is empty")

    rows = []
    for name in policies:
        for eps in parse_float_list(args.epsilons):
            scenario = config.scenario.with_(epsilon_fail=eps)
            metrics = _evaluate_named(name, models, scenario, config.channel)
            rows.append({
                "policy": name,
                "epsilon": eps,
                "mean_concurrent": metrics.mean("concurrent"),
                "stddev": metrics.std("concurrent"),
            })
    write_csv(args.out, pd.DataFrame(rows, columns=COMPARE_COLUMNS))
    return EXIT_OK


def cmd_sweep_objectives(args) -> int:
    config = _config(args)
    entries = [(name, model, config.scenario.objective) for name, model in _parse_models(args.model).items()]
    if args.registry:
        entries.extend(_registry_models(args.registry))
    if not entries:
        raise UsageError("sweep-objectives needs --registry DIR or at least one --model NAME=PATH")

    rows = []
    for name, model, objective in entries:
        for n in parse_int_list(args.nodes):
            scenario = config.scenario.with_(n=n, objective=objective)
            m = evaluate(model, scenario, config.channel, label=name)
            rows.append({"model": name, "n": n, "capacity_kb": m.mean("capacity_kb"), "fairness": m.mean("fairness")})
    write_csv(args.out, pd.DataFrame(rows, columns=SWEEP_COLUMNS))
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _config(args)
    scenario = config.scenario
    models = _parse_models(args.model)
    env = NetworkEnv.from_scenario(scenario, config.channel)

    if args.policy in models:
        joint = as_network_policy(models[args.policy], scenario.n)
        policy = RecurrentQPolicy([joint.snapshot_for(i).to_params() for i in range(scenario.n)], eps=0.0)
    else:
        try:
            policy = make_baseline(args.policy, scenario.n, seed=scenario.seed)
        except ValueError as e:
            raise UsageError(f"unknown policy {args.policy!r}: {e}") from e

    traces = [run_episode(env, policy, seed=[scenario.seed, r]) for r in range(scenario.runs)]
    out = save_traces(args.out, traces)
    logger.info("Saved %d episode traces to %s", len(traces), out)
    return EXIT_OK


def export_frame(arrays: dict) -> pd.DataFrame:
    """One row per (run, slot, node)."""
    actions = arrays["actions"]
    if actions.size == 0:
        return pd.DataFrame(columns=EXPORT_COLUMNS)
    runs, slots, n = actions.shape
    run, slot, node = np.meshgrid(np.arange(runs), np.arange(slots), np.arange(n), indexing="ij")
    return pd.DataFrame({
        "run": run.ravel(),
        "slot": slot.ravel(),
        "node": node.ravel(),
        "action_W": POWER_LEVELS_W[actions].ravel(),
        "sinr_db": sinr_db(arrays["sinr"]).ravel(),
        "bits": arrays["bits"].ravel(),
        "reward": np.repeat(arrays["rewards"][..., None], n, axis=2).ravel(),
        "concurrent_count": np.repeat(arrays["concurrent"][..., None], n, axis=2).ravel(),
    }, columns=EXPORT_COLUMNS)


def cmd_export(args) -> int:
    arrays = load_trace_arrays(args.trace)
    write_csv(args.out, export_frame(arrays))
    return EXIT_OK


def cmd_register(args) -> int:
    directory = Path(args.registry)
    registry = ModelRegistry.load(directory) if (directory / MANIFEST_NAME).exists() else ModelRegistry()
    snapshot = load_snapshot(args.snapshot)
    registry.register(args.objective, snapshot, expected_checksum=args.checksum)
    registry.save(directory)
    print(f"{Objective.parse(args.objective).value} {snapshot.checksum_hex}")
    return EXIT_OK


def cmd_what_if(args) -> int:
    config = _config(args)
    models = _parse_models(args.model)
    if args.registry:
        models.update({name: model for name, model, _ in _registry_models(args.registry)})
    if not models:
        raise UsageError("what-if needs --registry DIR or at least one --model NAME=PATH")

    objectives = [Objective.parse(o) for o in args.objectives.split(",")] if args.objectives \
        else [config.scenario.objective]
    scenarios = [
        config.scenario.with_(n=n, epsilon_fail=eps, objective=obj)
        for obj in objectives
        for n in parse_int_list(args.nodes)
        for eps in parse_float_list(args.epsilons)
    ]
    queue = queue_or_none(args.queue) if args.use_queue else None
    report = what_if(models, scenarios, config.channel, queue=queue)
    write_csv(args.out, report.to_frame())
    return EXIT_OK


def cmd_worker(args) -> int:
    run_worker(args.queue or None, burst=args.burst)
    return EXIT_OK


# ---------------------------
# Parser
# ---------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aquamesh", description="Underwater acoustic network simulator and twin")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="run configuration file (key = value)")
        p.add_argument("--seed", type=int, default=seed_default)
        return p

    p = common(sub.add_parser("train", help="train agents"), seed_default=0)
    p.add_argument("--mode", default="coordinated", choices=["coordinated", "uhpnf", "federated", "iql"])
    p.add_argument("--episodes", type=int)
    p.add_argument("--objective")
    p.add_argument("--epsilon-fail", type=float)
    p.add_argument("--out", required=True, help="snapshot file (.uhpf), or joint-policy manifest for iql")
    p.add_argument("--curve", help="learning-curve CSV (default: next to --out)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("compare", help="network reuse per policy and failure rate"))
    p.add_argument("--policies", default="greedy,tdma,random")
    p.add_argument("--epsilons", default="0,0.01,0.1,0.2")
    p.add_argument("--runs", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--model", action="append", metavar="NAME=PATH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = common(sub.add_parser("sweep-objectives", help="capacity and fairness per model and node count"))
    p.add_argument("--registry")
    p.add_argument("--model", action="append", metavar="NAME=PATH")
    p.add_argument("--nodes", default="3,4,5")
    p.add_argument("--runs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_objectives)

    p = common(sub.add_parser("simulate", help="run a policy and save its traces"))
    p.add_argument("--policy", default="greedy")
    p.add_argument("--model", action="append", metavar="NAME=PATH")
    p.add_argument("--runs", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--objective")
    p.add_argument("--epsilon-fail", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("export", help="per-slot CSV from a saved trace")
    p.add_argument("trace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("register", help="add a snapshot to a registry directory")
    p.add_argument("registry")
    p.add_argument("--objective", required=True)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--checksum", help="expected CRC32 as 8 hex digits")
    p.set_defaults(func=cmd_register)

    p = common(sub.add_parser("what-if", help="evaluate every model on every scenario"))
    p.add_argument("--registry")
    p.add_argument("--model", action="append", metavar="NAME=PATH")
    p.add_argument("--nodes", default="5")
    p.add_argument("--epsilons", default="0")
    p.add_argument("--objectives")
    p.add_argument("--runs", type=int)
    p.add_argument("--use-queue", action="store_true", help="fan cells out over REDIS_URL")
    p.add_argument("--queue")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_what_if)

    p = sub.add_parser("worker", help="serve queued what-if cells")
    p.add_argument("--queue", action="append")
    p.add_argument("--burst", action="store_true")
    p.set_defaults(func=cmd_worker)

    return parser


def _setup_logging():
    level = os.getenv("AQUAMESH_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    load_dotenv()
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"aquamesh: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, UnknownObjectiveError, PartitionError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except (OSError, SnapshotError, TraceFormatError, json.JSONDecodeError) as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL
    except ValueError as e:
        logger.error("Bad value: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
