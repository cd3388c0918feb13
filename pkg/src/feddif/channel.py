"""Simulated D2D link layer: pathloss, Rayleigh fading, rates and sub-frames."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_OUTAGE = 0.05


class LinkUnusable(ValueError):
    pass


def dbm_to_watt(dbm: float) -> float:
    return 10 ** ((dbm - 30) / 10)


@dataclass(frozen=True)
class RadioConfig:
    """Radio parameters; defaults follow 3GPP numerology 0.

    ``total_bandwidth`` is the carrier shared with CUEs and each diffusion
    round lasts ``subframes_per_round`` sub-frames, so the per-round budget
    is a bandwidth-time product in Hz*s.
    """

    beta0: float = -30.0  # dB at d0
    kappa: float = 3.5
    d0: float = 1.0
    noise_psd: float = dbm_to_watt(-174.0)  # W/Hz
    tx_power: float = 0.1  # W
    cell_radius: float = 250.0
    subcarrier_spacing: float = 15e3
    subframe_duration: float = 1e-3
    rb_bandwidth: float = 180e3
    rbs_per_link: int = 1
    total_bandwidth: float = 20e6
    subframes_per_round: int = 10
    cue_bandwidth: float = 180e3

    def __post_init__(self):
        for name in (
            "kappa", "d0", "noise_psd", "tx_power", "cell_radius",
            "subcarrier_spacing", "subframe_duration", "rb_bandwidth",
            "rbs_per_link", "total_bandwidth", "subframes_per_round",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"radio.{name} must be positive")
        if self.cue_bandwidth < 0:
            raise ValueError("radio.cue_bandwidth must be non-negative")

    @property
    def link_bandwidth(self) -> float:
        return self.rb_bandwidth * self.rbs_per_link

    @property
    def noise_power(self) -> float:
        return self.noise_psd * self.link_bandwidth

    def round_budget(self, n_cues: int = 0) -> float:
        """Hz*s left for model transmissions after CUE reservations."""
        free = max(self.total_bandwidth - n_cues * self.cue_bandwidth, 0.0)
        return free * self.subframes_per_round * self.subframe_duration


@dataclass(frozen=True)
class LinkState:
    distance: float
    beta: float
    h: complex
    g: complex
    snr: float
    spectral_eff: float


def large_scale_gain(distance, cfg: RadioConfig):
    """Linear power gain of ``beta0 - 10 kappa log10(d / d0)`` dB.

    Distances below ``d0`` (including co-located devices) are clamped to it.
    """
    d = np.maximum(np.asarray(distance, dtype=float), cfg.d0)
    gain_db = cfg.beta0 - 10.0 * cfg.kappa * np.log10(d / cfg.d0)
    gain = 10.0 ** (gain_db / 10.0)
    return float(gain) if np.ndim(gain) == 0 else gain


def sample_fading(rng, size=None):
    """CN(0, 1) Rayleigh coefficients: real and imaginary parts ~ N(0, 1/2)."""
    scale = math.sqrt(0.5)
    h = rng.normal(0.0, scale, size) + 1j * rng.normal(0.0, scale, size)
    return complex(h) if size is None else h


def snr_of(g, cfg: RadioConfig):
    return np.abs(g) ** 2 * cfg.tx_power / cfg.noise_power


def spectral_efficiency(link_or_snr, cfg: RadioConfig | None = None) -> float:
    """``log2(1 + snr)`` in bits/s/Hz."""
    snr = link_or_snr.snr if isinstance(link_or_snr, LinkState) else link_or_snr
    return float(np.log2(1.0 + snr))


def make_link(distance: float, h: complex, cfg: RadioConfig) -> LinkState:
    beta = large_scale_gain(distance, cfg)
    g = math.sqrt(beta) * h
    snr = float(snr_of(g, cfg))
    return LinkState(float(distance), beta, complex(h), complex(g), snr, spectral_efficiency(snr))


def required_resource(model_bits: int, gamma: float) -> float:
    """Bandwidth-time product ``S / gamma`` needed to ship ``model_bits``."""
    if not gamma > 0:
        raise LinkUnusable(f"link unusable: spectral efficiency {gamma!r}")
    return model_bits / gamma


def subframe_count(resource: float, allocated_bw: float, cfg: RadioConfig) -> int:
    if not allocated_bw > 0:
        raise ValueError("allocated_bw must be positive")
    if resource <= 0:
        return 0
    capacity = allocated_bw * cfg.subframe_duration
    n = max(1, math.ceil(resource / capacity))
    # The division can land a hair above an exact multiple.
    if n > 1 and (n - 1) * capacity >= resource:
        n -= 1
    return n


def outage_probability(rate_product: float, snr: float) -> float:
    """Rayleigh outage ``1 - exp(-(2^R - 1) / snr)``."""
    if snr <= 0:
        return 1.0
    if rate_product <= 0:
        return 0.0
    if rate_product * math.log(2.0) > 700.0:
        return 1.0
    # expm1 keeps precision when the exponent is tiny.
    x = math.expm1(rate_product * math.log(2.0)) / snr
    return -math.expm1(-x)


def gate_link(link: LinkState, gamma_min: float, rate_product: float,
              max_outage: float = MAX_OUTAGE) -> bool:
    if link.spectral_eff < gamma_min:
        return False
    return outage_probability(rate_product, link.snr) <= max_outage
