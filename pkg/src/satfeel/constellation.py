"""Walker-Delta constellation geometry and ground-station visibility.

Spherical Earth, circular orbits, ECEF output. Positions are cheap enough to
evaluate for whole constellations over blocks of time at once; the scalar
helpers below are thin wrappers around the vectorized kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

MU_EARTH_KM3_S2 = 398600.4418
EARTH_ROTATION_RAD_S = 7.2921159e-5


@dataclass(frozen=True)
class ConstellationSpec:
    """Walker-Delta shell: ``num_planes`` planes of ``sats_per_plane`` satellites."""

    num_planes: int = 4
    sats_per_plane: int = 20
    phasing: int = 1
    altitude_km: float = 500.0
    inclination_deg: float = 53.0
    earth_radius_km: float = 6371.0

    def __post_init__(self):
        if self.num_planes < 1:
            raise ValueError(f"num_planes must be >= 1, got {self.num_planes}")
        if self.sats_per_plane < 2:
            raise ValueError(f"sats_per_plane must be >= 2, got {self.sats_per_plane}")
        if not self.altitude_km > 0:
            raise ValueError(f"altitude_km must be > 0, got {self.altitude_km}")
        if not 0.0 <= self.inclination_deg <= 180.0:
            raise ValueError(f"inclination_deg must lie in [0, 180], got {self.inclination_deg}")
        if not self.earth_radius_km > 0:
            raise ValueError(f"earth_radius_km must be > 0, got {self.earth_radius_km}")

    @property
    def orbit_radius_km(self) -> float:
        return self.earth_radius_km + self.altitude_km

    @property
    def period_s(self) -> float:
        return 2.0 * math.pi * math.sqrt(self.orbit_radius_km**3 / MU_EARTH_KM3_S2)

    @property
    def num_sats(self) -> int:
        return self.num_planes * self.sats_per_plane

    def sat_ids(self) -> list[SatId]:
        return [SatId(m, k) for m in range(self.num_planes) for k in range(self.sats_per_plane)]

    def check(self, sat: SatId) -> None:
        if not (0 <= sat.orbit < self.num_planes and 0 <= sat.slot < self.sats_per_plane):
            raise IndexError(
                f"satellite {tuple(sat)} outside a {self.num_planes}x{self.sats_per_plane} constellation"
            )


class SatId(NamedTuple):
    orbit: int
    slot: int

    def flat(self, sats_per_plane: int) -> int:
        return self.orbit * sats_per_plane + self.slot

    def neighbors(self, sats_per_plane: int) -> tuple[SatId, SatId]:
        """Ring neighbors ``(k-1) mod K0`` and ``(k+1) mod K0`` within the same orbit."""
        return (
            SatId(self.orbit, (self.slot - 1) % sats_per_plane),
            SatId(self.orbit, (self.slot + 1) % sats_per_plane),
        )


@dataclass(frozen=True)
class GroundStation:
    name: str
    latitude_deg: float
    longitude_deg: float

    def __post_init__(self):
        if abs(self.latitude_deg) > 90.0:
            raise ValueError(f"{self.name}: latitude_deg out of range: {self.latitude_deg}")
        if abs(self.longitude_deg) > 180.0:
            raise ValueError(f"{self.name}: longitude_deg out of range: {self.longitude_deg}")


# The six stations of the reference experiment setup.
DEFAULT_STATIONS: tuple[GroundStation, ...] = (
    GroundStation("Beijing", 39.9289, 116.388),
    GroundStation("Berlin", 52.5167, 13.4),
    GroundStation("Cape Town", -33.9167, 18.4167),
    GroundStation("Rio De Janeiro", -22.9, -43.2333),
    GroundStation("Sydney", -33.8833, 151.217),
    GroundStation("Toronto", 43.6667, -79.4167),
)


class GslLink(NamedTuple):
    sat: SatId
    station: int
    distance_km: float


def _anomaly_and_raan(spec: ConstellationSpec, times: np.ndarray):
    M, K0 = spec.num_planes, spec.sats_per_plane
    m = np.arange(M)[:, None]
    k = np.arange(K0)[None, :]
    base = 2.0 * math.pi * (k / K0 + spec.phasing * m / (M * K0))  # (M, K0)
    drift = 2.0 * math.pi * times / spec.period_s  # (n,)
    anomaly = base[None, :, :] + drift[:, None, None]  # (n, M, K0)
    raan = 2.0 * math.pi * np.arange(M) / M
    return anomaly, raan


def constellation_positions(spec: ConstellationSpec, times) -> np.ndarray:
    """ECEF positions of every satellite, shape ``(n_times, M, K0, 3)`` in km."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    anomaly, raan = _anomaly_and_raan(spec, times)
    inc = math.radians(spec.inclination_deg)
    r = spec.orbit_radius_km
    cu, su = np.cos(anomaly), np.sin(anomaly)
    cO = np.cos(raan)[None, :, None]
    sO = np.sin(raan)[None, :, None]
    x = r * (cO * cu - sO * su * math.cos(inc))
    y = r * (sO * cu + cO * su * math.cos(inc))
    z = r * su * math.sin(inc)
    theta = EARTH_ROTATION_RAD_S * times
    ct = np.cos(theta)[:, None, None]
    st = np.sin(theta)[:, None, None]
    return np.stack([ct * x + st * y, -st * x + ct * y, z], axis=-1)


def satellite_position(spec: ConstellationSpec, sat: SatId, t: float) -> np.ndarray:
    """ECEF position (km) of one satellite at time ``t`` seconds after epoch."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    sat = SatId(*sat)
    spec.check(sat)
    return constellation_positions(spec, [t])[0, sat.orbit, sat.slot]


def gs_position(gs: GroundStation, earth_radius_km: float = 6371.0) -> np.ndarray:
    lat = math.radians(gs.latitude_deg)
    lon = math.radians(gs.longitude_deg)
    return earth_radius_km * np.array(
        [math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)]
    )


def station_positions(stations: Sequence[GroundStation], earth_radius_km: float = 6371.0) -> np.ndarray:
    if not stations:
        return np.zeros((0, 3))
    return np.stack([gs_position(gs, earth_radius_km) for gs in stations])


def gsl_feasible(sat_pos, gs_pos, min_elevation_deg: float) -> bool:
    """True iff the angle between ``sat - gs`` and the local zenith ``gs`` is at most
    ``90 - min_elevation_deg`` degrees."""
    sat_pos = np.asarray(sat_pos, dtype=float)
    gs_pos = np.asarray(gs_pos, dtype=float)
    gs_norm = float(np.linalg.norm(gs_pos))
    if gs_norm == 0.0:
        raise ValueError("ground-station position has zero length")
    los = sat_pos - gs_pos
    los_norm = float(np.linalg.norm(los))
    if los_norm == 0.0:
        return True
    cos_angle = float(np.dot(los, gs_pos)) / (los_norm * gs_norm)
    angle = math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))
    return angle <= 90.0 - min_elevation_deg


def elevation_deg(sat_pos, gs_pos) -> float:
    sat_pos = np.asarray(sat_pos, dtype=float)
    gs_pos = np.asarray(gs_pos, dtype=float)
    los = sat_pos - gs_pos
    s = float(np.dot(los, gs_pos)) / (np.linalg.norm(los) * np.linalg.norm(gs_pos))
    return math.degrees(math.asin(min(1.0, max(-1.0, s))))


def slant_range_km(sat_pos, gs_pos) -> float:
    return float(np.linalg.norm(np.asarray(sat_pos, dtype=float) - np.asarray(gs_pos, dtype=float)))


def slant_range_at_elevation_km(altitude_km: float, elevation_deg: float, earth_radius_km: float = 6371.0) -> float:
    """Closed-form slant range to a satellite seen at the given elevation."""
    s = math.sin(math.radians(elevation_deg))
    Re, h = earth_radius_km, altitude_km
    return math.sqrt(Re * Re * s * s + 2.0 * Re * h + h * h) - Re * s


def visibility(spec: ConstellationSpec, gs_pos: np.ndarray, times, min_elevation_deg: float):
    """Vectorized feasibility test.

    Returns ``(feasible, distance)``, both shaped ``(n_times, M, K0, G)``.
    Uses the same angle criterion as :func:`gsl_feasible`, expressed on cosines.
    """
    sats = constellation_positions(spec, times)  # (n, M, K0, 3)
    gs = np.asarray(gs_pos, dtype=float).reshape(-1, 3)
    los = sats[..., None, :] - gs[None, None, None, :, :]  # (n, M, K0, G, 3)
    dist = np.linalg.norm(los, axis=-1)
    gs_norm = np.linalg.norm(gs, axis=-1)
    dot = np.einsum("nmkgc,gc->nmkg", los, gs)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_angle = np.clip(dot / (dist * gs_norm), -1.0, 1.0)
    angle = np.degrees(np.arccos(cos_angle))
    feasible = (angle <= 90.0 - min_elevation_deg) | (dist == 0.0)
    return feasible, dist


def feasible_gsls(
    spec: ConstellationSpec,
    stations: Sequence[GroundStation],
    t: float,
    min_elevation_deg: float,
) -> list[GslLink]:
    """All (satellite, station) pairs with a feasible link at time ``t``, ordered by
    satellite then station index."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if not stations:
        return []
    gs = station_positions(stations, spec.earth_radius_km)
    feasible, dist = visibility(spec, gs, [t], min_elevation_deg)
    out = []
    for m, k, g in zip(*np.nonzero(feasible[0])):
        out.append(GslLink(SatId(int(m), int(k)), int(g), float(dist[0, m, k, g])))
    return out
