import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from satfeel.channel import IslSpec
from satfeel.ringreduce import (
    CCW,
    CW,
    ModelVec,
    RingTooSmall,
    intra_orbit_average,
    make_layout,
    rar_time_s,
    ring_allreduce,
    ring_allreduce_half_duplex,
)


def weighted_mean(vals, ws):
    return sum(w * v for w, v in zip(ws, vals)) / sum(ws)


def random_models(rng, K, d):
    vals = [rng.standard_normal(d) for _ in range(K)]
    ws = rng.uniform(0.1, 3.0, K)
    return vals, ws, [ModelVec(v, w) for v, w in zip(vals, ws)]


def test_layout_divisible():
    lay = make_layout(12, 3)
    assert (lay.d_padded, lay.chunk_len) == (12, 2)
    assert len(lay.boundaries) == 6


def test_layout_padding():
    lay = make_layout(10, 3)
    assert lay.d_padded == 12 and lay.d_padded - lay.d == 2


def test_layout_unit_chunks():
    lay = make_layout(8, 4)
    assert lay.chunk_len == 1 and lay.boundaries[-1] == (7, 8)


def test_layout_rejects_single_satellite():
    with pytest.raises(RingTooSmall):
        make_layout(10, 1)


def test_identical_models_fixed_point():
    z = np.linspace(-1, 1, 17)
    res = ring_allreduce([ModelVec(z, 1.0) for _ in range(5)], make_layout(17, 5))
    for out in res.outputs:
        assert np.allclose(out, z, rtol=0, atol=1e-15)


@pytest.mark.parametrize("K", range(2, 9))
def test_matches_weighted_mean(K, rng):
    d = int(rng.integers(2 * K, 200))
    vals, ws, models = random_models(rng, K, d)
    oracle = weighted_mean(vals, ws)
    res = ring_allreduce(models, make_layout(d, K))
    assert res.iterations == 2 * K - 2
    for out in res.outputs:
        assert np.linalg.norm(out - oracle) <= 1e-9 * np.linalg.norm(oracle)


@settings(max_examples=40, deadline=None)
@given(K=st.integers(2, 16), extra=st.integers(0, 100), seed=st.integers(0, 2**31))
def test_exactness_property(K, extra, seed):
    rng = np.random.default_rng(seed)
    d = 2 * K + extra
    vals, ws, models = random_models(rng, K, d)
    oracle = weighted_mean(vals, ws)
    for out in ring_allreduce(models, make_layout(d, K), record=False).outputs:
        assert np.linalg.norm(out - oracle) <= 1e-9 * np.linalg.norm(oracle)


def test_half_duplex_three_satellites():
    # K=3: chunks move one hop clockwise per iteration, 4 iterations in total
    rng = np.random.default_rng(0)
    vals, ws, models = random_models(rng, 3, 9)
    res = ring_allreduce_half_duplex(models)
    assert res.iterations == 4
    by_iter = {}
    for tx in res.schedule:
        by_iter.setdefault(tx.iteration, []).append((tx.sender, tx.receiver, tx.chunk, tx.phase))
    assert by_iter[0] == [(0, 1, 0, "reduce"), (1, 2, 1, "reduce"), (2, 0, 2, "reduce")]
    assert by_iter[1] == [(0, 1, 2, "reduce"), (1, 2, 0, "reduce"), (2, 0, 1, "reduce")]
    assert by_iter[2] == [(0, 1, 1, "gather"), (1, 2, 2, "gather"), (2, 0, 0, "gather")]
    assert by_iter[3] == [(0, 1, 0, "gather"), (1, 2, 1, "gather"), (2, 0, 2, "gather")]
    oracle = weighted_mean(vals, ws)
    for out in res.outputs:
        assert np.allclose(out, oracle, atol=1e-12)


@pytest.mark.parametrize("K", [2, 3, 5, 8])
def test_schedule_validity(K, rng):
    _, _, models = random_models(rng, K, 4 * K)
    res = ring_allreduce(models, make_layout(4 * K, K))
    for i in range(res.iterations):
        txs = [t for t in res.schedule if t.iteration == i]
        for k in range(K):
            mine = [t for t in txs if t.sender == k]
            assert sorted(t.direction for t in mine) == [CCW, CW]
            cw = next(t for t in mine if t.direction == CW)
            ccw = next(t for t in mine if t.direction == CCW)
            assert cw.receiver == (k + 1) % K and ccw.receiver == (k - 1) % K
    # a chunk index travels a given directed edge at most once per phase
    for phase in ("reduce", "gather"):
        seen = set()
        for t in res.schedule:
            if t.phase != phase:
                continue
            key = (t.sender, t.receiver, t.direction, t.chunk)
            assert key not in seen
            seen.add(key)


def test_deterministic(rng):
    _, _, models = random_models(rng, 6, 50)
    a = ring_allreduce(models, make_layout(50, 6)).outputs
    b = ring_allreduce(models, make_layout(50, 6)).outputs
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_schedule_csv_header(rng):
    _, _, models = random_models(rng, 3, 6)
    text = ring_allreduce(models, make_layout(6, 3)).schedule_csv()
    assert text.splitlines()[0] == "iteration,sender,receiver,direction,chunk,phase"
    assert len(text.splitlines()) == 1 + 2 * 3 * 4


def test_input_validation(rng):
    _, _, models = random_models(rng, 3, 6)
    with pytest.raises(ValueError):
        ring_allreduce(models[:2], make_layout(6, 3))
    with pytest.raises(ValueError):
        ring_allreduce(models, make_layout(7, 3))
    bad = [ModelVec(np.array([np.nan] * 6))] + models[1:]
    with pytest.raises(ValueError):
        ring_allreduce(bad, make_layout(6, 3))
    with pytest.raises(ValueError):
        ModelVec(np.zeros(3), weight=-1.0)


def test_single_satellite_orbit_bypasses_ring():
    z = np.arange(5.0)
    assert np.array_equal(intra_orbit_average([ModelVec(z, 2.0)]), z)


def test_rar_time_reference_values():
    isl = IslSpec(rate_bytes_per_s=1e10, sum_time_s=0.01)
    assert rar_time_s(50, 0.5e9, isl) == pytest.approx(0.98 * 0.05 + 98 * 0.01, rel=1e-12)
    assert rar_time_s(50, 0.5e9, isl) == pytest.approx(1.029, abs=1e-12)
    assert rar_time_s(2, 0.5e9, isl) == pytest.approx(0.5 * 0.05 + 2 * 0.01, rel=1e-12)


def test_rar_time_communication_term_bounded():
    isl = IslSpec(sum_time_s=0.0)
    prev = 0.0
    for K in range(2, 200):
        t = rar_time_s(K, 0.5e9, isl)
        assert prev < t < 0.05
        prev = t
    assert rar_time_s(10**6, 0.5e9, isl) == pytest.approx(0.05, rel=1e-5)


def test_rar_time_sum_term_linear():
    isl = IslSpec(sum_time_s=0.01)
    comm = IslSpec(sum_time_s=0.0)
    sums = [rar_time_s(K, 1e9, isl) - rar_time_s(K, 1e9, comm) for K in (2, 3, 4, 10)]
    assert sums == pytest.approx([0.02, 0.04, 0.06, 0.18])


def test_rar_time_slowest_hop():
    isl = IslSpec()
    assert rar_time_s(4, 1e9, isl, hop_rates=[1e10, 5e9, 2e10, 1e10]) == rar_time_s(
        4, 1e9, IslSpec(rate_bytes_per_s=5e9)
    )
