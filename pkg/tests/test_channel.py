import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from feddif import channel
from feddif.channel import (
    LinkUnusable, RadioConfig, gate_link, large_scale_gain, make_link, outage_probability,
    required_resource, sample_fading, spectral_efficiency, subframe_count,
)

import oracles

CFG = RadioConfig()


def test_gain_at_reference_distance():
    assert large_scale_gain(CFG.d0, CFG) == pytest.approx(10 ** (CFG.beta0 / 10))


def test_gain_example():
    cfg = RadioConfig(beta0=0.0, kappa=3.0)
    assert large_scale_gain(10.0, cfg) == pytest.approx(1e-3, rel=1e-12)


def test_gain_frozen_defaults():
    assert large_scale_gain(100.0, CFG) == pytest.approx(1e-10, rel=1e-12)
    assert large_scale_gain(250.0, CFG) == pytest.approx(4.047715405015529e-12, rel=1e-12)


def test_gain_clamps_colocated():
    assert large_scale_gain(0.0, CFG) == large_scale_gain(CFG.d0, CFG)


@given(st.floats(0.01, 5000), st.floats(0.01, 5000), st.floats(0.1, 6))
def test_gain_monotone(d1, d2, kappa):
    cfg = RadioConfig(kappa=kappa)
    lo, hi = sorted((d1, d2))
    assert large_scale_gain(hi, cfg) <= large_scale_gain(lo, cfg)


@given(st.floats(0.5, 3000), st.floats(-60, 0))
def test_gain_matches_oracle(d, beta0):
    cfg = RadioConfig(beta0=beta0)
    assert large_scale_gain(d, cfg) == pytest.approx(
        oracles.pathloss_linear(d, beta0, cfg.kappa, cfg.d0), rel=1e-12)


def test_fading_moments():
    h = sample_fading(np.random.default_rng(0), 100_000)
    p = np.abs(h) ** 2
    assert 0.99 <= p.mean() <= 1.01
    assert np.mean(p <= 1.0) == pytest.approx(1 - math.exp(-1), abs=0.005)
    assert np.var(h.real) == pytest.approx(0.5, abs=0.01)
    assert np.var(h.imag) == pytest.approx(0.5, abs=0.01)


def test_fading_deterministic():
    a = sample_fading(np.random.default_rng(3), 5)
    b = sample_fading(np.random.default_rng(3), 5)
    assert np.array_equal(a, b)
    assert isinstance(sample_fading(np.random.default_rng(3)), complex)


@pytest.mark.parametrize("snr,gamma", [(3.0, 2.0), (0.0, 0.0), (1.0, 1.0)])
def test_spectral_efficiency_examples(snr, gamma):
    assert spectral_efficiency(snr) == pytest.approx(gamma, abs=1e-15)


@given(st.floats(1.0, 500), st.complex_numbers(max_magnitude=5, allow_nan=False,
                                               allow_infinity=False))
def test_link_pipeline_identity(d, h):
    link = make_link(d, h, CFG)
    assert abs(link.g) ** 2 == pytest.approx(link.beta * abs(h) ** 2, rel=1e-9, abs=1e-300)
    beta = oracles.pathloss_linear(d, CFG.beta0, CFG.kappa)
    snr = beta * abs(h) ** 2 * CFG.tx_power / (CFG.noise_psd * CFG.rb_bandwidth)
    assert link.spectral_eff == pytest.approx(math.log2(1 + snr), rel=1e-9, abs=1e-12)
    assert link.spectral_eff == pytest.approx(math.log2(1 + link.snr), rel=1e-9, abs=1e-12)


def test_noise_power_default():
    # -174 dBm/Hz over one 180 kHz resource block.
    assert CFG.noise_power == pytest.approx(10 ** (-20.4) * 180e3, rel=1e-9)


def test_required_resource():
    assert required_resource(10**6, 2.0) == 5e5
    assert required_resource(0, 2.0) == 0
    assert required_resource(1000, 4.0) == required_resource(1000, 2.0) / 2
    with pytest.raises(LinkUnusable, match="link unusable"):
        required_resource(1000, 0.0)


def test_subframe_examples():
    assert subframe_count(5e5, 180e3, CFG) == 2778
    assert subframe_count(180.0, 180e3, CFG) == 1
    assert subframe_count(180.0 * 3, 180e3, CFG) == 3
    assert subframe_count(1e-9, 180e3, CFG) == 1
    assert subframe_count(0.0, 180e3, CFG) == 0
    with pytest.raises(ValueError):
        subframe_count(1.0, 0.0, CFG)


@given(st.floats(1e-6, 1e9), st.floats(1e3, 1e8))
def test_subframes_conservative(resource, bw):
    n = subframe_count(resource, bw, CFG)
    cap = bw * CFG.subframe_duration
    assert n >= 1
    assert n * cap >= resource
    assert (n - 1) * cap < resource


@given(st.floats(1e-6, 1e9), st.floats(1e3, 1e8))
def test_subframes_monotone_in_bandwidth(resource, bw):
    assert subframe_count(resource, 2 * bw, CFG) <= subframe_count(resource, bw, CFG)


def test_outage_examples():
    assert outage_probability(1.0, 1.0) == pytest.approx(1 - math.exp(-1), abs=1e-12)
    assert outage_probability(0.0, 5.0) == 0.0
    assert outage_probability(1.0, 1e12) < 1e-11
    assert outage_probability(1.0, 0.0) == 1.0
    assert outage_probability(5000.0, 1e6) == 1.0


@given(st.floats(0, 40), st.floats(1e-3, 1e8))
def test_outage_matches_oracle(r, snr):
    assert outage_probability(r, snr) == pytest.approx(oracles.outage(r, snr), rel=1e-9, abs=1e-15)


@given(st.floats(0, 20), st.floats(0, 20), st.floats(1e-2, 1e6))
def test_outage_monotone(r1, r2, snr):
    lo, hi = sorted((r1, r2))
    assert outage_probability(lo, snr) <= outage_probability(hi, snr)
    assert outage_probability(lo, 2 * snr) <= outage_probability(lo, snr)


def _link(snr):
    return channel.LinkState(1.0, 1.0, 1.0, 1.0, snr, spectral_efficiency(snr))


def test_gate_examples():
    # One bit of rate: outage 1 - exp(-1/snr); 5% needs snr >= 19.496.
    assert outage_probability(1.0, 19.5) == pytest.approx(0.04998931898973196, rel=1e-9)
    assert gate_link(_link(19.5), 1.0, 1.0)
    assert not gate_link(_link(19.0), 1.0, 1.0)
    assert not gate_link(_link(100.0), 7.0, 1.0)  # gamma below gamma_min
    # outage 0.04 passes, 0.06 fails
    assert gate_link(_link(1 / -math.log(0.96)), 0.0, 1.0)
    assert not gate_link(_link(1 / -math.log(0.94)), 0.0, 1.0)


@given(st.floats(1e-3, 1e6), st.floats(1e-3, 1e6), st.floats(0, 5), st.floats(0, 5))
def test_gate_monotone_in_snr(s1, s2, gmin, rate):
    lo, hi = sorted((s1, s2))
    if gate_link(_link(lo), gmin, rate):
        assert gate_link(_link(hi), gmin, rate)


@given(st.floats(1e-3, 1e6), st.floats(0, 5))
def test_gate_with_zero_gamma_min_is_outage_only(snr, rate):
    ok = outage_probability(rate, snr) <= 0.05
    assert gate_link(_link(snr), 0.0, rate) == ok


def test_round_budget():
    cfg = RadioConfig(total_bandwidth=1e6, cue_bandwidth=1e5, subframes_per_round=10)
    assert cfg.round_budget(0) == pytest.approx(1e6 * 10 * 1e-3)
    assert cfg.round_budget(3) == pytest.approx(7e5 * 10 * 1e-3)
    assert cfg.round_budget(50) == 0.0


def test_radio_validation():
    with pytest.raises(ValueError, match="kappa"):
        RadioConfig(kappa=0)
    RadioConfig(beta0=12.0)
