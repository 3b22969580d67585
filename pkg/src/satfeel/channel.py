"""Link-rate models for ground-to-satellite (RF) and intra-orbit laser links.

GSL rates are computed in bits/s, ISL rates are configured in bytes/s. Every
conversion between the two goes through :func:`bits_to_bytes` /
:func:`bytes_to_bits`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .constellation import slant_range_at_elevation_km

SPEED_OF_LIGHT_M_S = 2.998e8
BITS_PER_BYTE = 8


def bits_to_bytes(bits: float) -> float:
    return bits / BITS_PER_BYTE


def bytes_to_bits(nbytes: float) -> float:
    return nbytes * BITS_PER_BYTE


@dataclass(frozen=True)
class LinkBudget:
    carrier_hz: float = 32e9
    tx_power_w: float = 10.0  # 40 dBm
    tx_gain_lin: float = 10**1.5  # 15 dBi
    rx_gain_lin: float = 10**3.0  # 30 dBi
    bandwidth_hz: float = 62.5e6
    noise_temp_k: float = 354.0
    boltzmann: float = 1.380649e-23
    min_elevation_deg: float = 45.0
    access_time_s: float = 10.0
    # Evaluate every GSL at the slant range of min_elevation_deg instead of
    # the true geometry.
    fixed_elevation_rate: bool = False

    def __post_init__(self):
        for name in (
            "carrier_hz",
            "tx_power_w",
            "tx_gain_lin",
            "rx_gain_lin",
            "bandwidth_hz",
            "noise_temp_k",
            "boltzmann",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0.0 <= self.min_elevation_deg <= 90.0:
            raise ValueError(f"min_elevation_deg must lie in [0, 90], got {self.min_elevation_deg}")
        if self.access_time_s < 0:
            raise ValueError(f"access_time_s must be >= 0, got {self.access_time_s}")

    @property
    def noise_psd(self) -> float:
        return self.boltzmann * self.noise_temp_k


@dataclass(frozen=True)
class IslSpec:
    rate_bytes_per_s: float = 1e10
    full_duplex: bool = True
    sum_time_s: float = 0.01

    def __post_init__(self):
        if not self.rate_bytes_per_s > 0:
            raise ValueError(f"rate_bytes_per_s must be > 0, got {self.rate_bytes_per_s}")
        if not self.full_duplex:
            raise ValueError("laser ISLs are modelled as full duplex")
        if self.sum_time_s < 0:
            raise ValueError(f"sum_time_s must be >= 0, got {self.sum_time_s}")


def free_space_gain(distance_km: float, carrier_hz: float) -> float:
    """Free-space path gain ``(c0 / (4 pi f d))**2`` with ``d`` converted to metres."""
    if not distance_km > 0:
        raise ValueError(f"distance must be > 0, got {distance_km} km")
    d_m = distance_km * 1e3
    return (SPEED_OF_LIGHT_M_S / (4.0 * math.pi * carrier_hz * d_m)) ** 2


def snr(distance_km: float, budget: LinkBudget) -> float:
    h = free_space_gain(distance_km, budget.carrier_hz)
    return h * budget.tx_power_w * budget.tx_gain_lin * budget.rx_gain_lin / (budget.bandwidth_hz * budget.noise_psd)


def gsl_rate_bps(distance_km: float, budget: LinkBudget) -> float:
    """Shannon rate of a GSL at the given slant range."""
    return budget.bandwidth_hz * math.log2(1.0 + snr(distance_km, budget))


def gsl_capacity_fraction(rate_bps: float, slot_s: float, model_bytes: float) -> float:
    """Fraction of one model a link of ``rate_bps`` moves in one slot. Not clamped."""
    if not (rate_bps > 0 and slot_s > 0 and model_bytes > 0):
        raise ValueError("rate, slot length and model size must all be positive")
    return bits_to_bytes(rate_bps * slot_s) / model_bytes


def transmit_time_s(nbytes: float, rate_bytes_per_s: float) -> float:
    if nbytes < 0:
        raise ValueError(f"byte count must be >= 0, got {nbytes}")
    if not rate_bytes_per_s > 0:
        raise ValueError(f"rate must be > 0, got {rate_bytes_per_s}")
    return nbytes / rate_bytes_per_s


def reference_gsl_rate_bps(budget: LinkBudget, altitude_km: float, earth_radius_km: float = 6371.0) -> float:
    """GSL rate at the slant range where the satellite sits at the minimum elevation."""
    d = slant_range_at_elevation_km(altitude_km, budget.min_elevation_deg, earth_radius_km)
    return gsl_rate_bps(d, budget)


def rate_table(budget: LinkBudget, altitude_km: float, elevations_deg, earth_radius_km: float = 6371.0):
    """Rows of ``(elevation_deg, slant_range_km, rate_bps)``."""
    rows = []
    for e in elevations_deg:
        d = slant_range_at_elevation_km(altitude_km, e, earth_radius_km)
        rows.append((float(e), d, gsl_rate_bps(d, budget)))
    return rows
