import numpy as np
import pytest

from acoustic_channel import (ChannelParams, GainMatrix, gain_matrix, jain_fairness, noise_level, shannon_rate,
                              sinr, sinr_db, source_intensity, thorp_absorption, transmission_loss)
from sim_env import POWER_LEVELS_W
from topology import place_cylinder

DEFAULT = ChannelParams()


@pytest.mark.parametrize("f_khz, expected", [
    (1.0, 0.0690041),
    (10.0, 1.1870299),
    (20.0, 4.1338368),
])
def test_thorp_absorption(f_khz, expected):
    assert thorp_absorption(f_khz) == pytest.approx(expected, rel=1e-6)


def test_thorp_rejects_non_positive_frequency():
    with pytest.raises(ValueError):
        thorp_absorption(0.0)


def test_transmission_loss_at_one_km():
    # 15 * log10(1000) + alpha(20 kHz) * 1 km
    assert transmission_loss(1000.0, DEFAULT) == pytest.approx(45.0 + 4.1338368, rel=1e-6)


def test_transmission_loss_reference_distance_is_absorption_only():
    assert transmission_loss(1.0, DEFAULT) == pytest.approx(4.1338368e-3, rel=1e-6)


def test_transmission_loss_vectorised_and_monotone():
    d = np.array([10.0, 100.0, 1000.0, 4000.0])
    tl = transmission_loss(d, DEFAULT)
    assert tl.shape == d.shape
    assert np.all(np.diff(tl) > 0)


def test_transmission_loss_below_reference_distance():
    with pytest.raises(ValueError):
        transmission_loss(0.5, DEFAULT)


def test_spherical_spreading_exponent():
    p = ChannelParams(spreading_exponent=2.0)
    assert transmission_loss(100.0, p) == pytest.approx(40.0 + 0.41338368, rel=1e-6)


def test_noise_level():
    assert noise_level(DEFAULT) == pytest.approx(66.581460, rel=1e-6)
    assert noise_level(ChannelParams(carrier_freq_khz=10.0)) == pytest.approx(72.0, rel=1e-9)


def test_shannon_rate():
    assert shannon_rate(0.0, 10_000.0) == 0.0
    assert shannon_rate(1.0, 10_000.0) == pytest.approx(10_000.0)
    assert shannon_rate(3.0, 10_000.0) == pytest.approx(20_000.0)
    with pytest.raises(ValueError):
        shannon_rate(-0.1, 10_000.0)


@pytest.mark.parametrize("x, expected", [
    ([5.0, 5.0, 5.0], 1.0),
    ([1.0, 0.0, 0.0, 0.0], 0.25),
    ([1.0, 2.0, 3.0], 6.0 / 7.0),
])
def test_jain_fairness(x, expected):
    assert jain_fairness(x) == pytest.approx(expected)


@pytest.mark.parametrize("bad", [[], [0.0, 0.0], [1.0, -1.0]])
def test_jain_fairness_rejects(bad):
    with pytest.raises(ValueError):
        jain_fairness(bad)


def test_source_intensity_silent_is_zero():
    s = source_intensity([0.0, 1.0], DEFAULT)
    assert s[0] == 0.0
    assert 10 * np.log10(s[1]) == pytest.approx(170.8)


def test_single_link_budget():
    tl = transmission_loss(1000.0, DEFAULT)
    gains = GainMatrix(g=np.array([[10 ** (-tl / 10)]]))
    out = sinr(np.array([64.0]), gains, DEFAULT)
    expected_db = 170.8 + 10 * np.log10(64.0) - tl - noise_level(DEFAULT)
    assert sinr_db(out)[0] == pytest.approx(expected_db, rel=1e-9)
    assert expected_db == pytest.approx(73.1465, abs=1e-3)


def test_two_link_interference():
    g = np.array([[1e-5, 1e-6], [1e-6, 1e-5]])
    out = sinr(np.array([16.0, 16.0]), GainMatrix(g=g), DEFAULT)
    s = 10 ** ((170.8 + 10 * np.log10(16.0)) / 10)
    noise = 10 ** (noise_level(DEFAULT) / 10)
    assert out == pytest.approx(np.full(2, s * 1e-5 / (noise + s * 1e-6)), rel=1e-12)


def test_silent_link_has_zero_sinr_and_causes_no_interference():
    g = np.array([[1e-5, 1e-6], [1e-6, 1e-5]])
    both = sinr(np.array([16.0, 0.0]), GainMatrix(g=g), DEFAULT)
    alone = sinr(np.array([16.0]), GainMatrix(g=np.array([[1e-5]])), DEFAULT)
    assert both[1] == 0.0
    assert both[0] == pytest.approx(alone[0])


def test_sinr_input_checks():
    gains = GainMatrix(g=np.eye(2))
    with pytest.raises(ValueError):
        sinr(np.array([1.0]), gains, DEFAULT)
    with pytest.raises(ValueError):
        sinr(np.array([1.0, -1.0]), gains, DEFAULT)


def test_gain_matrix_diagonal_matches_direct_distance():
    topo = place_cylinder(5)
    gains = gain_matrix(topo, DEFAULT)
    d = topo.distances()
    assert gains.n == 5
    assert gains.g[0, 0] == pytest.approx(10 ** (-transmission_loss(d[0, 0], DEFAULT) / 10))


def test_channel_params_validation():
    with pytest.raises(ValueError):
        ChannelParams(spreading_exponent=2.5)
    with pytest.raises(ValueError):
        ChannelParams(bandwidth_hz=0.0)


def test_thorp_strictly_increasing_up_to_100_khz():
    grid = np.linspace(0.01, 100.0, 5000)
    alpha = np.array([thorp_absorption(f) for f in grid])
    assert np.all(np.diff(alpha) > 0)


def test_sinr_never_rises_with_interferer_power():
    gains = gain_matrix(place_cylinder(5), DEFAULT)
    for j in range(1, 5):
        link0 = []
        for p in POWER_LEVELS_W:
            powers = np.array([64.0, 8.0, 8.0, 8.0, 8.0])
            powers[j] = p
            link0.append(sinr(powers, gains, DEFAULT)[0])
        assert np.all(np.diff(link0) <= 0)
        assert link0[-1] < link0[0]


@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e6])
def test_jain_fairness_scale_invariant(scale):
    x = np.array([1.0, 4.0, 0.0, 2.5, 9.0])
    assert jain_fairness(scale * x) == pytest.approx(jain_fairness(x), rel=1e-12)
