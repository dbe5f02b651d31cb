# topology.py
"""
Node placement in the cylindrical deployment region and Bernoulli failure sampling.
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

PLACEMENT_MODES = ("deterministic", "uniform-random")


@dataclass(frozen=True)
class Topology:
    """Link i is tx_pos[i] -> rx_pos[i]. Transmitters sit at z = 0, receivers at z = height."""
    tx_pos: np.ndarray
    rx_pos: np.ndarray
    radius: float
    height: float

    @property
    def n(self) -> int:
        return self.tx_pos.shape[0]

    def distances(self) -> np.ndarray:
        """d[i, j] = distance from transmitter j to receiver i, in metres."""
        diff = self.rx_pos[:, None, :] - self.tx_pos[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))


@dataclass(frozen=True)
class FailureMask:
    failed: np.ndarray

    @property
    def healthy(self) -> np.ndarray:
        return ~self.failed

    @classmethod
    def none(cls, n: int) -> "FailureMask":
        return cls(failed=np.zeros(n, dtype=bool))


def _disk_points(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    # sqrt keeps the density uniform over the disk area
    r = radius * np.sqrt(rng.random(n))
    theta = 2 * np.pi * rng.random(n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def place_cylinder(n: int, radius: float = 4000.0, height: float = 1000.0,
                   mode: str = "deterministic", seed: int | None = None) -> Topology:
    """
    Place n transmitter/receiver pairs.

    deterministic: transmitters evenly spaced on a circle of radius/2 at the bottom
    (angles 2*pi*i/n); receiver i on the same circle at the top, rotated by pi/n.
    uniform-random: tx uniform in the bottom disk, rx uniform in the top disk.
    """
    if n < 1:
        raise ValueError(f"topology needs at least one node, got n={n}")
    if not (radius > 0 and height > 0):
        raise ValueError(f"radius and height must be > 0, got {radius}, {height}")

    if mode == "deterministic":
        ring = radius / 2.0
        angles = 2 * np.pi * np.arange(n) / n
        tx_xy = np.stack([ring * np.cos(angles), ring * np.sin(angles)], axis=1)
        rx_xy = np.stack([ring * np.cos(angles + np.pi / n), ring * np.sin(angles + np.pi / n)], axis=1)
    elif mode == "uniform-random":
        rng = np.random.default_rng(seed)
        tx_xy = _disk_points(rng, n, radius)
        rx_xy = _disk_points(rng, n, radius)
    else:
        raise ValueError(f"unknown placement mode {mode!r}; expected one of {PLACEMENT_MODES}")

    tx = np.column_stack([tx_xy, np.zeros(n)])
    rx = np.column_stack([rx_xy, np.full(n, float(height))])
    return Topology(tx_pos=tx, rx_pos=rx, radius=float(radius), height=float(height))


def sample_failures(epsilon: float, n: int, rng: np.random.Generator) -> FailureMask:
    """Each node fails independently with probability epsilon."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"failure probability must lie in [0, 1], got {epsilon}")
    return FailureMask(failed=rng.random(n) < epsilon)
