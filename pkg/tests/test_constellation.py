import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from satfeel.constellation import (
    DEFAULT_STATIONS,
    EARTH_ROTATION_RAD_S,
    ConstellationSpec,
    GroundStation,
    SatId,
    constellation_positions,
    elevation_deg,
    feasible_gsls,
    gs_position,
    gsl_feasible,
    satellite_position,
    slant_range_at_elevation_km,
    slant_range_km,
    station_positions,
)

SPEC = ConstellationSpec()  # 80/4/1 at 500 km
RE = 6371.0


def sat_at_elevation(elev_deg, alt=500.0):
    """Satellite in the x-y plane seen from a station at (RE, 0, 0) under the given elevation.

    Built from the central angle (triangle Earth centre / station / satellite),
    independent of the closed-form slant-range expression.
    """
    r = RE + alt
    e = math.radians(elev_deg)
    gamma = math.pi / 2 - e - math.asin(RE * math.cos(e) / r)
    return np.array([r * math.cos(gamma), r * math.sin(gamma), 0.0])


def rot_z(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def test_equatorial_phase_zero():
    spec = ConstellationSpec(inclination_deg=0.0)
    p = satellite_position(spec, SatId(0, 0), 0.0)
    assert p == pytest.approx([6871.0, 0.0, 0.0], abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(m=st.integers(0, 3), k=st.integers(0, 19), t=st.floats(0, 1e6))
def test_orbit_radius_constant(m, k, t):
    assert np.linalg.norm(satellite_position(SPEC, SatId(m, k), t)) == pytest.approx(6871.0, abs=1e-6)


@pytest.mark.parametrize("sat", [SatId(0, 0), SatId(2, 7), SatId(3, 19)])
def test_one_period_is_earth_rotation(sat):
    T = SPEC.period_s
    p0 = satellite_position(SPEC, sat, 0.0)
    p1 = satellite_position(SPEC, sat, T)
    # inertial frame is fixed; ECEF rotates by -omega*T
    expected = rot_z(-EARTH_ROTATION_RAD_S * T) @ p0
    assert np.allclose(p1, expected, atol=1e-6)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        satellite_position(SPEC, SatId(0, 0), -1.0)


def test_unknown_satellite_rejected():
    with pytest.raises(IndexError):
        satellite_position(SPEC, SatId(4, 0), 0.0)


@pytest.mark.parametrize(
    "lat,lon,expected",
    [(0.0, 0.0, (RE, 0.0, 0.0)), (90.0, 0.0, (0.0, 0.0, RE)), (90.0, 123.0, (0.0, 0.0, RE))],
)
def test_gs_position_cardinal(lat, lon, expected):
    assert gs_position(GroundStation("x", lat, lon)) == pytest.approx(expected, abs=1e-9)


def test_beijing_round_trip():
    bj = DEFAULT_STATIONS[0]
    x, y, z = gs_position(bj)
    lat = math.degrees(math.asin(z / RE))
    lon = math.degrees(math.atan2(y, x))
    assert lat == pytest.approx(bj.latitude_deg, abs=1e-9)
    assert lon == pytest.approx(bj.longitude_deg, abs=1e-9)


def test_station_validation():
    with pytest.raises(ValueError, match="latitude_deg"):
        GroundStation("bad", 91.0, 0.0)


def test_zenith_always_feasible():
    gs = np.array([RE, 0.0, 0.0])
    for phi in (0.0, 45.0, 89.0, 90.0):
        assert gsl_feasible([RE + 500.0, 0.0, 0.0], gs, phi)


def test_antipodal_never_feasible():
    gs = np.array([RE, 0.0, 0.0])
    for phi in (0.0, 10.0, 45.0):
        assert not gsl_feasible([-(RE + 500.0), 0.0, 0.0], gs, phi)


def test_elevation_threshold_edges():
    gs = np.array([RE, 0.0, 0.0])
    low, high = sat_at_elevation(44.9), sat_at_elevation(45.1)
    assert elevation_deg(low, gs) == pytest.approx(44.9, abs=1e-9)
    assert not gsl_feasible(low, gs, 45.0)
    assert gsl_feasible(high, gs, 45.0)


def test_zero_station_vector_rejected():
    with pytest.raises(ValueError):
        gsl_feasible([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], 45.0)


def test_slant_range_cases():
    gs = np.array([RE, 0.0, 0.0])
    assert slant_range_km([RE + 500.0, 0.0, 0.0], gs) == pytest.approx(500.0)
    assert slant_range_km(gs, gs) == 0.0
    assert slant_range_at_elevation_km(500.0, 90.0) == pytest.approx(500.0)
    # independent geometric construction vs the closed form
    oracle = slant_range_km(sat_at_elevation(45.0), gs)
    assert oracle == pytest.approx(683.0, abs=1.0)
    assert slant_range_at_elevation_km(500.0, 45.0) == pytest.approx(oracle, rel=1e-12)


def brute_force_gsls(spec, stations, t, phi):
    out = []
    for m in range(spec.num_planes):
        for k in range(spec.sats_per_plane):
            p = satellite_position(spec, SatId(m, k), t)
            for g, gs in enumerate(stations):
                q = gs_position(gs, spec.earth_radius_km)
                if gsl_feasible(p, q, phi):
                    out.append((SatId(m, k), g, slant_range_km(p, q)))
    return out


@pytest.mark.parametrize("t", [0.0, 137.0, 1000.0, 4321.5, 20000.0])
def test_feasible_gsls_matches_brute_force(t):
    got = feasible_gsls(SPEC, DEFAULT_STATIONS, t, 45.0)
    want = brute_force_gsls(SPEC, DEFAULT_STATIONS, t, 45.0)
    assert [(l.sat, l.station) for l in got] == [(s, g) for s, g, _ in want]
    for l, (_, _, d) in zip(got, want):
        assert l.distance_km == pytest.approx(d, rel=1e-12)


def test_feasible_gsls_degenerate_inputs():
    assert feasible_gsls(SPEC, [], 0.0, 45.0) == []
    gs = [GroundStation("eq", 0.0, 0.0)]
    for l in feasible_gsls(SPEC, gs, 0.0, 90.0):
        # only an exact zenith pass could qualify
        assert elevation_deg(satellite_position(SPEC, l.sat, 0.0), gs_position(gs[0])) == pytest.approx(90.0)


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0, 2e5), m=st.integers(0, 3), k=st.integers(0, 19))
def test_isl_neighbour_distance_constant(t, m, k):
    a = satellite_position(SPEC, SatId(m, k), t)
    b = satellite_position(SPEC, SatId(m, (k + 1) % 20), t)
    a0 = satellite_position(SPEC, SatId(m, k), 0.0)
    b0 = satellite_position(SPEC, SatId(m, (k + 1) % 20), 0.0)
    assert np.linalg.norm(a - b) == pytest.approx(np.linalg.norm(a0 - b0), abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    t=st.floats(0, 1e5),
    m=st.integers(0, 3),
    k=st.integers(0, 19),
    g=st.integers(0, 5),
    lo=st.floats(0, 90),
    hi=st.floats(0, 90),
)
def test_feasibility_monotone_in_min_elevation(t, m, k, g, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    p = satellite_position(SPEC, SatId(m, k), t)
    q = gs_position(DEFAULT_STATIONS[g])
    if gsl_feasible(p, q, hi):
        assert gsl_feasible(p, q, lo)


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0, 1e5), m=st.integers(0, 3), k=st.integers(0, 19))
def test_periodic_after_undoing_rotation(t, m, k):
    T = SPEC.period_s
    p = satellite_position(SPEC, SatId(m, k), t)
    q = satellite_position(SPEC, SatId(m, k), t + T)
    assert np.allclose(rot_z(EARTH_ROTATION_RAD_S * (t + T)) @ q, rot_z(EARTH_ROTATION_RAD_S * t) @ p, atol=1e-6)


def test_positions_array_shape():
    pos = constellation_positions(SPEC, [0.0, 1.0, 2.0])
    assert pos.shape == (3, 4, 20, 3)
    assert station_positions([]).shape == (0, 3)


def test_spec_validation():
    with pytest.raises(ValueError, match="altitude_km"):
        ConstellationSpec(altitude_km=-1.0)
    with pytest.raises(ValueError, match="num_planes"):
        ConstellationSpec(num_planes=0)
