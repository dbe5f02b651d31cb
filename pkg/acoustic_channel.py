# acoustic_channel.py
"""
Acoustic link budget for the simulator.

Thorp absorption, practical spreading and a simplified ambient noise floor.
All SINR math stays in the linear domain; dB only appears at the interfaces.
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelParams:
    carrier_freq_khz: float = 20.0
    bandwidth_hz: float = 10_000.0
    spreading_exponent: float = 1.5
    sound_speed: float = 1500.0
    source_level_offset_db: float = 170.8
    sinr_threshold: float = 1.0

    def __post_init__(self):
        if not self.carrier_freq_khz > 0:
            raise ValueError(f"carrier_freq_khz must be > 0, got {self.carrier_freq_khz}")
        if not self.bandwidth_hz > 0:
            raise ValueError(f"bandwidth_hz must be > 0, got {self.bandwidth_hz}")
        if not 1.0 <= self.spreading_exponent <= 2.0:
            raise ValueError(f"spreading_exponent must lie in [1, 2], got {self.spreading_exponent}")
        if not self.sound_speed > 0:
            raise ValueError(f"sound_speed must be > 0, got {self.sound_speed}")
        if not self.sinr_threshold > 0:
            raise ValueError(f"sinr_threshold must be > 0, got {self.sinr_threshold}")


@dataclass(frozen=True)
class GainMatrix:
    """g[i, j] is the linear power gain from transmitter j to receiver i."""
    g: np.ndarray

    @property
    def n(self) -> int:
        return self.g.shape[0]


def thorp_absorption(f_khz: float) -> float:
    """Thorp absorption coefficient in dB/km at f kHz."""
    if not f_khz > 0:
        raise ValueError(f"frequency must be > 0 kHz, got {f_khz}")
    f2 = f_khz ** 2
    return 0.11 * f2 / (1 + f2) + 44 * f2 / (4100 + f2) + 2.75e-4 * f2 + 0.003


def transmission_loss(d_m, params: ChannelParams):
    """
    One-way loss in dB: k*10*log10(d) + alpha(f)*d/1000, reference distance 1 m.
    Accepts a scalar or an array of distances.
    """
    d = np.asarray(d_m, dtype=float)
    if np.any(d < 1.0):
        raise ValueError(f"distance below the 1 m reference: {np.min(d)}")
    tl = 10 * params.spreading_exponent * np.log10(d) + thorp_absorption(params.carrier_freq_khz) * d / 1000.0
    return float(tl) if tl.ndim == 0 else tl


def noise_level(params: ChannelParams) -> float:
    """Total in-band ambient noise in dB."""
    spectral = 50 - 18 * np.log10(params.carrier_freq_khz)
    return float(spectral + 10 * np.log10(params.bandwidth_hz))


def gain_matrix(topology, params: ChannelParams) -> GainMatrix:
    # distances()[i, j] = |tx_j - rx_i|
    tl = transmission_loss(topology.distances(), params)
    return GainMatrix(g=np.power(10.0, -np.asarray(tl) / 10.0))


def source_intensity(powers_w, params: ChannelParams) -> np.ndarray:
    """Linear source intensity per node; silent nodes map to 0."""
    p = np.asarray(powers_w, dtype=float)
    out = np.zeros_like(p)
    on = p > 0
    out[on] = np.power(10.0, (params.source_level_offset_db + 10 * np.log10(p[on])) / 10.0)
    return out


def sinr(powers_w, gains: GainMatrix, params: ChannelParams) -> np.ndarray:
    """
    Per-link SINR, linear. Link i is tx_i -> rx_i; silent links get 0.
    """
    p = np.asarray(powers_w, dtype=float)
    if p.shape != (gains.n,):
        raise ValueError(f"expected {gains.n} powers, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError(f"negative transmit power: {p}")

    s = source_intensity(p, params)
    direct = np.diag(gains.g) * s
    interference = gains.g @ s - direct
    n_lin = 10.0 ** (noise_level(params) / 10.0)

    out = np.zeros_like(p)
    on = p > 0
    out[on] = direct[on] / (n_lin + interference[on])
    return out


def sinr_db(values) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 10 * np.log10(np.asarray(values, dtype=float))


def shannon_rate(sinr_lin, bandwidth_hz: float):
    """Shannon capacity in bit/s."""
    s = np.asarray(sinr_lin, dtype=float)
    if np.any(s < 0):
        raise ValueError(f"negative SINR: {s}")
    rate = bandwidth_hz * np.log2(1.0 + s)
    return float(rate) if rate.ndim == 0 else rate


def jain_fairness(x) -> float:
    """Jain index (sum x)^2 / (n * sum x^2), in [1/n, 1]."""
    v = np.asarray(x, dtype=float)
    if v.size == 0:
        raise ValueError("jain_fairness needs at least one value")
    if np.any(v < 0):
        raise ValueError(f"jain_fairness needs non-negative values, got {v}")
    sq = float(np.sum(v * v))
    if sq == 0.0:
        raise ValueError("jain_fairness is undefined for an all-zero allocation")
    return float(np.sum(v)) ** 2 / (v.size * sq)
