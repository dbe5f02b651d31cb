# baselines.py
"""
Comparison policies: Greedy, TDMA, Random, and IQL (a trained policy, see drl_agent).
"""

import logging
from enum import Enum
from typing import Callable

import numpy as np

from drl_agent import TrainingMode, train
from sim_env import N_ACTIONS

logger = logging.getLogger(__name__)

MAX_POWER_INDEX = N_ACTIONS - 1


class BaselineKind(str, Enum):
    GREEDY = "greedy"
    TDMA = "tdma"
    RANDOM = "random"
    IQL = "iql"


def greedy_policy(slot: int, node: int) -> int:
    return MAX_POWER_INDEX


def tdma_policy(slot: int, node: int, n: int) -> int:
    if n < 1:
        raise ValueError(f"TDMA needs n >= 1, got {n}")
    return MAX_POWER_INDEX if slot % n == node else 0


def random_policy(rng: np.random.Generator) -> int:
    # index 0 means the node refrains this slot
    return int(rng.integers(N_ACTIONS))


class PerNodePolicy:
    """Adapts a stateless (slot, node) -> power index rule to the environment's Policy protocol."""

    def __init__(self, rule: Callable[[int, int], int]):
        self.rule = rule
        self.n = 0

    def begin_episode(self, n: int) -> None:
        self.n = n

    def act(self, slot: int, observations) -> np.ndarray:
        return np.array([self.rule(slot, i) for i in range(self.n)], dtype=int)


class RandomPolicy:
    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.n = 0

    def begin_episode(self, n: int) -> None:
        self.n = n

    def act(self, slot: int, observations) -> np.ndarray:
        return np.array([random_policy(self.rng) for _ in range(self.n)], dtype=int)


def make_baseline(kind, n: int, seed=None):
    """Build the joint policy for a static baseline."""
    kind = BaselineKind(kind)
    if kind is BaselineKind.GREEDY:
        return PerNodePolicy(greedy_policy)
    if kind is BaselineKind.TDMA:
        return PerNodePolicy(lambda slot, node: tdma_policy(slot, node, n))
    if kind is BaselineKind.RANDOM:
        return RandomPolicy(seed)
    raise ValueError("IQL is a trained policy: train it with drl_agent.train(mode='iql') or iql_agent()")


def iql_agent(config, scenario, seed: int = 0, channel=None):
    """Independent Q-learning baseline; every node learns from its own delivered bits."""
    return train(config, scenario, mode=TrainingMode.IQL, seed=seed, channel=channel)
