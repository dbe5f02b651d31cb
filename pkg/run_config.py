# run_config.py
"""
Run configuration: a key = value text file, one setting per line.

    # channel
    channel.carrier_freq_khz = 20
    scenario.n = 5
    scenario.objective = capacity
    train.episodes = 20000
    federation.responsive = false

Every key is optional; anything not given keeps its default. Values are read
with python-dotenv, so quoting and trailing comments behave as in a .env file.
"""

import io
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from dotenv import dotenv_values

from acoustic_channel import ChannelParams
from drl_agent import TrainConfig
from federation import SinkConfig
from sim_env import Objective, Scenario
from topology import PLACEMENT_MODES

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.message = message
        self.line = line
        self.path = path
        super().__init__(message)

    def __str__(self):
        where = ""
        if self.path is not None:
            where = f"{self.path}:"
        if self.line is not None:
            where += f"{self.line}:"
        return f"{where} {self.message}" if where else self.message


def _bool(text: str) -> bool:
    key = text.strip().lower()
    if key in ("1", "true", "yes", "on"):
        return True
    if key in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    # accepts "300000", "300_000" and "3e5" style integers
    value = float(text.replace("_", "")) if re.search(r"[eE.]", text) else int(text.replace("_", ""))
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _float(text: str) -> float:
    return float(text.replace("_", ""))


def _objective(text: str) -> str:
    return Objective.parse(text).value


def _placement(text: str) -> str:
    mode = text.strip().lower()
    if mode not in PLACEMENT_MODES:
        raise ValueError(f"placement must be one of {PLACEMENT_MODES}, got {text!r}")
    return mode


# config key -> (section, dataclass field, converter)
KEYS = {
    "channel.carrier_freq_khz": ("channel", "carrier_freq_khz", _float),
    "channel.bandwidth_hz": ("channel", "bandwidth_hz", _float),
    "channel.spreading_exponent": ("channel", "spreading_exponent", _float),
    "channel.sound_speed": ("channel", "sound_speed", _float),
    "channel.source_level_offset_db": ("channel", "source_level_offset_db", _float),
    "channel.sinr_threshold": ("channel", "sinr_threshold", _float),
    "topology.radius_m": ("scenario", "radius", _float),
    "topology.height_m": ("scenario", "height", _float),
    "topology.placement": ("scenario", "placement", _placement),
    "scenario.n": ("scenario", "n", _int),
    "scenario.epsilon_fail": ("scenario", "epsilon_fail", _float),
    "scenario.objective": ("scenario", "objective", _objective),
    "scenario.slots": ("scenario", "slots", _int),
    "scenario.slot_duration_s": ("scenario", "slot_duration", _float),
    "scenario.battery_capacity_j": ("scenario", "battery_capacity", _float),
    "scenario.seed": ("scenario", "seed", _int),
    "scenario.runs": ("scenario", "runs", _int),
    "train.episodes": ("train", "total_episodes", _int),
    "train.batch_size": ("train", "batch_size", _int),
    "train.buffer_capacity": ("train", "buffer_capacity", _int),
    "train.target_update": ("train", "target_update_period", _int),
    "train.gamma": ("train", "gamma", _float),
    "train.epsilon_start": ("train", "epsilon_start", _float),
    "train.epsilon_end": ("train", "epsilon_end", _float),
    "train.epsilon_decay_episodes": ("train", "epsilon_decay_episodes", _int),
    "train.learning_rate": ("train", "learning_rate", _float),
    "train.curve_every": ("train", "curve_every", _int),
    "federation.sync_period": ("sink", "sync_period", _int),
    "federation.window": ("sink", "window", _int),
    "federation.dead_rate": ("sink", "dead_rate", _float),
    "federation.healthy_mean": ("sink", "healthy_mean", _float),
    "federation.responsive": ("sink", "responsive", _bool),
}


@dataclass(frozen=True)
class RunConfig:
    channel: ChannelParams = field(default_factory=ChannelParams)
    scenario: Scenario = field(default_factory=Scenario)
    train: TrainConfig = field(default_factory=TrainConfig)
    sink: SinkConfig = field(default_factory=SinkConfig)

    def with_(self, section: str, **changes) -> "RunConfig":
        return replace(self, **{section: replace(getattr(self, section), **changes)})


def _scan_keys(lines, path) -> dict:
    """key -> last line number it appears on; rejects malformed lines and unknown keys."""
    seen = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("export "):
            line = line[len("export "):].lstrip()
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.rstrip()!r}", lineno, path)
        key = line.split("=", 1)[0].strip()
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        seen[key] = lineno
    return seen


def _blame(err: ValueError, section: str, seen: dict) -> int | None:
    """Best line to report for a validation error raised while building a section."""
    candidates = [(line, KEYS[key][1]) for key, line in seen.items() if KEYS[key][0] == section]
    if not candidates:
        return None
    text = str(err)
    named = [line for line, name in candidates if re.search(rf"\b{name}\b", text)]
    return max(named) if named else max(line for line, _ in candidates)


def parse_run_config(text: str, path=None) -> RunConfig:
    lines = text.splitlines()
    seen = _scan_keys(lines, path)
    values = dotenv_values(stream=io.StringIO(text))

    overrides = {"channel": {}, "scenario": {}, "train": {}, "sink": {}}
    for key, lineno in seen.items():
        raw = values.get(key)
        if raw is None or raw.strip() == "":
            raise ConfigError(f"missing value for {key!r}", lineno, path)
        section, name, convert = KEYS[key]
        try:
            overrides[section][name] = convert(raw.strip())
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}", lineno, path) from e

    built = {}
    defaults = RunConfig()
    for section, changes in overrides.items():
        try:
            built[section] = replace(getattr(defaults, section), **changes)
            if section == "scenario":
                built[section].episode_config()
        except ValueError as e:
            raise ConfigError(str(e), _blame(e, section, seen), path) from e

    config = RunConfig(**built)
    logger.debug("Parsed run config %s with %d settings", path or "<text>", len(seen))
    return config


def load_run_config(path=None) -> RunConfig:
    """Defaults when path is None; FileNotFoundError when the file is missing."""
    if path is None:
        return RunConfig()
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_run_config(text, path)


def describe(config: RunConfig) -> dict:
    """Flat key -> value view of a config, using the file's key names."""
    out = {}
    for key, (section, name, _) in KEYS.items():
        value = getattr(getattr(config, section), name)
        out[key] = value.value if hasattr(value, "value") else value
    return out

