"""Simulated training loops for FedMega, HL-SGD and FedISL with a delay ledger.

All three algorithms share one loop: broadcast the global model, run ``T``
intra-orbit rounds of ``E`` local SGD steps each followed by an intra-orbit
aggregation, then aggregate globally at the parameter server. They differ in
the intra-orbit step (ring all-reduce, one gossip step, nothing) and in how a
round is charged on the simulated clock.

Round timeline on the clock: local training and intra-orbit aggregation,
then the wait for a feasible GSL, then download, upload and the in-orbit
broadcast of the new global model.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .channel import IslSpec, LinkBudget, bits_to_bytes, gsl_rate_bps, transmit_time_s
from .constellation import (
    DEFAULT_STATIONS,
    ConstellationSpec,
    GroundStation,
    GslLink,
    SatId,
    slant_range_at_elevation_km,
    station_positions,
    visibility,
)
from .flowsched import StallError, schedule_transfer
from .learnkit import FederatedData, MlpArch, evaluate, local_sgd, sgd_stream
from .ringreduce import ModelVec, intra_orbit_average, rar_time_s

log = logging.getLogger(__name__)

ALGORITHMS = ("fedmega", "hlsgd", "fedisl")


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 600  # R
    intra_rounds: int = 10  # T
    local_steps: int = 5  # E
    eta: float = 0.01
    batch: int = 25
    seed: int = 0

    def __post_init__(self):
        for name in ("rounds", "intra_rounds", "local_steps", "batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")


@dataclass(frozen=True)
class PhysicalSetup:
    """Everything the delay model needs besides the learning task."""

    constellation: ConstellationSpec = ConstellationSpec()
    stations: tuple[GroundStation, ...] = DEFAULT_STATIONS
    link: LinkBudget = LinkBudget()
    isl: IslSpec = IslSpec()
    model_bytes: float = 0.5e9
    t_comp_s: float = 2.0
    slot_s: float = 1.0
    # "any": first slot with any feasible GSL; "every": first slot where every
    # orbit has one at once; "fixed": wait_fixed_s every round; "none": zero.
    wait_mode: str = "any"
    wait_fixed_s: float = 0.0
    # "formula": t_down = I / gamma_gsl at the min-elevation range;
    # "scheduled": use the max-flow scheduler's measured transfer times.
    timing: str = "formula"
    measure_transfers: bool = True
    access_policy: str = "per_contact"
    gdl_caps: tuple[float, ...] | None = None
    relay_hops: int | None = None  # FedISL in-orbit relay; default ceil(K0 / 2)
    horizon_s: float = 86400.0

    def __post_init__(self):
        if self.wait_mode not in ("any", "every", "fixed", "none"):
            raise ValueError(f"unknown wait_mode {self.wait_mode!r}")
        if self.timing not in ("formula", "scheduled"):
            raise ValueError(f"unknown timing {self.timing!r}")
        if self.timing == "scheduled" and not self.measure_transfers:
            raise ValueError("timing='scheduled' needs measure_transfers=True")
        if not self.model_bytes > 0:
            raise ValueError(f"model_bytes must be > 0, got {self.model_bytes}")
        if self.t_comp_s < 0:
            raise ValueError(f"t_comp_s must be >= 0, got {self.t_comp_s}")
        if not self.slot_s > 0:
            raise ValueError(f"slot_s must be > 0, got {self.slot_s}")
        if self.wait_fixed_s < 0:
            raise ValueError(f"wait_fixed_s must be >= 0, got {self.wait_fixed_s}")

    @property
    def uses_geometry(self) -> bool:
        return self.wait_mode in ("any", "every") or self.measure_transfers

    @property
    def reference_distance_km(self) -> float:
        c = self.constellation
        return slant_range_at_elevation_km(c.altitude_km, self.link.min_elevation_deg, c.earth_radius_km)

    @property
    def gsl_rate_bytes_per_s(self) -> float:
        return bits_to_bytes(gsl_rate_bps(self.reference_distance_km, self.link))

    @property
    def t_down_s(self) -> float:
        return transmit_time_s(self.model_bytes, self.gsl_rate_bytes_per_s)

    @property
    def t_bc_s(self) -> float:
        return transmit_time_s(self.model_bytes, self.isl.rate_bytes_per_s)


IDEAL_LINKS = dict(wait_mode="none", measure_transfers=False)


class VisibilityTimeline:
    """Per-slot GSL feasibility on the absolute slot grid, computed in cached blocks.

    Slot ``j`` covers ``[j * slot_s, (j + 1) * slot_s)``; geometry is sampled at
    the slot start and held for the whole slot.
    """

    def __init__(
        self,
        spec: ConstellationSpec,
        stations: Sequence[GroundStation],
        min_elevation_deg: float,
        slot_s: float = 1.0,
        block: int | None = None,
        max_blocks: int = 4,
    ):
        self.spec = spec
        self.stations = tuple(stations)
        self.min_elevation_deg = min_elevation_deg
        self.slot_s = slot_s
        self.gs = station_positions(self.stations, spec.earth_radius_km)
        per_slot = max(1, spec.num_sats * max(1, len(self.stations)))
        self.block = block or int(min(4096, max(64, 2**20 // per_slot)))
        self.max_blocks = max_blocks
        self._cache: OrderedDict[int, tuple] = OrderedDict()

    def _get(self, b: int):
        hit = self._cache.get(b)
        if hit is not None:
            self._cache.move_to_end(b)
            return hit
        M, K0, G = self.spec.num_planes, self.spec.sats_per_plane, len(self.stations)
        n = self.block
        if G == 0:
            feas = np.zeros((n, M, K0, 0), bool)
            dist = np.zeros((n, M, K0, 0))
        else:
            times = (b * n + np.arange(n)) * self.slot_s
            feas, dist = visibility(self.spec, self.gs, times, self.min_elevation_deg)
        orbit_vis = feas.any(axis=(2, 3))
        entry = (feas, dist, orbit_vis)
        self._cache[b] = entry
        if len(self._cache) > self.max_blocks:
            self._cache.popitem(last=False)
        return entry

    def slot_of(self, t: float) -> int:
        return int(math.floor(t / self.slot_s + 1e-9))

    def links(self, slot: int) -> list[GslLink]:
        feas, dist, _ = self._get(slot // self.block)
        i = slot % self.block
        out = []
        for m, k, g in zip(*np.nonzero(feas[i])):
            out.append(GslLink(SatId(int(m), int(k)), int(g), float(dist[i, m, k, g])))
        return out

    def orbit_visible(self, slot: int) -> np.ndarray:
        _, _, ov = self._get(slot // self.block)
        return ov[slot % self.block]

    def first_slot(self, start: int, condition: Callable[[np.ndarray], np.ndarray], limit: int) -> int | None:
        """First slot in ``[start, start + limit]`` whose ``(M,)`` orbit-visibility row satisfies
        ``condition`` (applied row-wise to an ``(n, M)`` block)."""
        slot = start
        end = start + limit
        while slot <= end:
            b = slot // self.block
            _, _, ov = self._get(b)
            lo = slot - b * self.block
            hi = min(self.block, end - b * self.block + 1)
            hits = np.flatnonzero(condition(ov[lo:hi]))
            if hits.size:
                return b * self.block + lo + int(hits[0])
            slot = (b + 1) * self.block
        return None

    def next_slot_with_links(self, start: int, orbits: Sequence[int], limit: int) -> int | None:
        idx = list(orbits)
        return self.first_slot(start, lambda ov: ov[:, idx].any(axis=1), limit)


def _wait_condition(require: str):
    if require == "any":
        return lambda ov: ov.any(axis=1)
    if require == "every":
        return lambda ov: ov.all(axis=1)
    raise ValueError(f"require must be 'any' or 'every', got {require!r}")


def waiting_time_s(
    constellation: ConstellationSpec,
    stations: Sequence[GroundStation],
    t_now: float,
    min_elevation_deg: float,
    *,
    slot_s: float = 1.0,
    horizon_s: float = 86400.0,
    require: str = "any",
    timeline: VisibilityTimeline | None = None,
) -> float:
    """Time from ``t_now`` until GSLs become usable, searched on the slot grid.

    ``require="any"`` waits for the first feasible GSL of any orbit (the
    distributed download can start then); ``require="every"`` waits until each
    orbit has a feasible GSL in the same slot. Returns 0 if the condition
    already holds in the slot containing ``t_now``.
    """
    if t_now < 0:
        raise ValueError(f"t_now must be >= 0, got {t_now}")
    if timeline is None:
        timeline = VisibilityTimeline(constellation, stations, min_elevation_deg, slot_s)
    cond = _wait_condition(require)
    start = timeline.slot_of(t_now)
    limit = int(math.ceil(horizon_s / timeline.slot_s))
    found = timeline.first_slot(start, cond, limit)
    if found is None:
        raise StallError(
            f"no slot within {horizon_s:.0f} s of t={t_now:.1f} s satisfies require={require!r} "
            f"at min elevation {min_elevation_deg} deg"
        )
    if found == start:
        return 0.0
    return found * timeline.slot_s - t_now


@dataclass
class DelayLedger:
    """One round's delay components; ``total`` is fixed at construction."""

    round: int
    algorithm: str
    t_down: float
    t_up: float
    t_bc: float
    t_comp: float  # one local step
    t_rar: float  # one intra-orbit aggregation (ring all-reduce, gossip exchange or relay)
    T: int
    E: int
    t_wait: float
    t_down_formula: float = 0.0
    t_down_measured: float | None = None
    t_up_measured: float | None = None
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.recompute_total()

    @property
    def intra_block(self) -> float:
        return self.T * (self.E * self.t_comp + self.t_rar)

    @property
    def t_comp_total(self) -> float:
        return self.T * self.E * self.t_comp

    @property
    def t_rar_total(self) -> float:
        return self.T * self.t_rar

    def recompute_total(self) -> float:
        # t_up == t_down in formula timing, and x + x == 2 * x exactly
        return (self.t_down + self.t_up) + self.t_bc + self.intra_block + self.t_wait


@dataclass
class MetricsRow:
    algorithm: str
    round: int
    intra_round: int
    cum_time_s: float
    train_loss: float
    test_acc: float


@dataclass
class RunResult:
    algorithm: str
    metrics: list[MetricsRow]
    ledger: list[DelayLedger]
    final_model: ModelVec
    trajectory: list[np.ndarray] = field(default_factory=list)
    intra_models: list[tuple[int, int, np.ndarray]] = field(default_factory=list)

    def global_rows(self) -> list[MetricsRow]:
        return [row for row in self.metrics if row.intra_round == 0]

    def time_to_accuracy(self, target: float) -> float:
        """Simulated seconds until the global model first reaches ``target`` test accuracy."""
        for row in self.global_rows():
            if row.test_acc >= target:
                return row.cum_time_s
        return math.inf

    def accuracy_at_round(self, r: int) -> float:
        for row in self.global_rows():
            if row.round == r:
                return row.test_acc
        raise KeyError(f"round {r} not recorded")


def ring_mixing_matrix(K: int) -> np.ndarray:
    """Doubly stochastic ring gossip: 1/3 to self and each neighbour (1/2 each when K = 2)."""
    if K == 1:
        return np.ones((1, 1))
    if K == 2:
        return np.full((2, 2), 0.5)
    W = np.zeros((K, K))
    for k in range(K):
        W[k, k] += 1 / 3
        W[k, (k + 1) % K] += 1 / 3
        W[k, (k - 1) % K] += 1 / 3
    return W


def orbit_weights(sat_weights: np.ndarray, M: int, K0: int) -> np.ndarray:
    return np.asarray(sat_weights, dtype=float).reshape(M, K0).sum(axis=1)


def global_average(orbit_models: Sequence[np.ndarray], w_orbit: np.ndarray) -> np.ndarray:
    """``sum_m w_m zbar_m / sum_m w_m`` accumulated in ascending orbit order."""
    acc = np.zeros_like(orbit_models[0])
    for wm, zm in zip(w_orbit, orbit_models):
        acc += wm * zm
    return acc / float(np.sum(w_orbit))


def weighted_average(models: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    acc = np.zeros_like(models[0])
    for w, z in zip(weights, models):
        acc += w * z
    return acc / float(np.sum(weights))


class _Clock:
    """Simulated clock plus the physical side of each round (waits, transfers)."""

    def __init__(self, phys: PhysicalSetup):
        self.phys = phys
        self.now = 0.0
        self.timeline = None
        if phys.uses_geometry:
            self.timeline = VisibilityTimeline(
                phys.constellation, phys.stations, phys.link.min_elevation_deg, phys.slot_s
            )

    def wait(self, t: float) -> float:
        p = self.phys
        if p.wait_mode == "none":
            return 0.0
        if p.wait_mode == "fixed":
            return p.wait_fixed_s
        return waiting_time_s(
            p.constellation,
            p.stations,
            t,
            p.link.min_elevation_deg,
            slot_s=p.slot_s,
            horizon_s=p.horizon_s,
            require=p.wait_mode,
            timeline=self.timeline,
        )

    def transfer(self, t: float, direction: str) -> float:
        p = self.phys
        res = schedule_transfer(
            [1.0] * p.constellation.num_planes,
            self.timeline,
            p.slot_s,
            p.model_bytes,
            p.link,
            direction=direction,
            start_slot=self.timeline.slot_of(t),
            num_stations=len(p.stations),
            gdl_caps=p.gdl_caps,
            access_policy=p.access_policy,
            horizon_slots=int(math.ceil(p.horizon_s / p.slot_s)),
            keep_assignments=False,
            reference_distance_km=p.reference_distance_km if p.link.fixed_elevation_rate else None,
        )
        return res.total_time_s


def _aggregation_time(algorithm: str, phys: PhysicalSetup) -> float:
    K0 = phys.constellation.sats_per_plane
    if algorithm == "fedmega":
        return rar_time_s(K0, phys.model_bytes, phys.isl)
    if algorithm == "hlsgd":
        return transmit_time_s(phys.model_bytes, phys.isl.rate_bytes_per_s)
    hops = phys.relay_hops if phys.relay_hops is not None else math.ceil(K0 / 2)
    return hops * transmit_time_s(phys.model_bytes, phys.isl.rate_bytes_per_s)


def _round_ledger(r: int, algorithm: str, phys: PhysicalSetup, train: TrainConfig, clock: _Clock) -> DelayLedger:
    T = 1 if algorithm == "fedisl" else train.intra_rounds
    E = train.local_steps
    t_agg = _aggregation_time(algorithm, phys)
    intra = T * (E * phys.t_comp_s + t_agg)
    t_wait = clock.wait(clock.now + intra)
    t_down_f = phys.t_down_s
    down_m = up_m = None
    if phys.measure_transfers:
        start = clock.now + intra + t_wait
        down_m = clock.transfer(start, "down")
        up_m = clock.transfer(start + (down_m if phys.timing == "scheduled" else t_down_f), "up")
    if phys.timing == "scheduled":
        t_down, t_up = down_m, up_m
    else:
        t_down, t_up = t_down_f, t_down_f
    return DelayLedger(
        round=r,
        algorithm=algorithm,
        t_down=t_down,
        t_up=t_up,
        t_bc=phys.t_bc_s,
        t_comp=phys.t_comp_s,
        t_rar=t_agg,
        T=T,
        E=E,
        t_wait=t_wait,
        t_down_formula=t_down_f,
        t_down_measured=down_m,
        t_up_measured=up_m,
    )


def simulate(
    algorithm: str,
    phys: PhysicalSetup,
    train: TrainConfig,
    data: FederatedData,
    arch: MlpArch = MlpArch(),
    *,
    init: np.ndarray | None = None,
    record_trajectory: bool = False,
    record_intra_models: bool = False,
    eval_intra: bool = False,
    stop_at_accuracy: float | None = None,
) -> RunResult:
    """Run one algorithm for ``train.rounds`` global rounds.

    ``data.train`` must list one dataset per satellite in ``(orbit, slot)``
    order. ``stop_at_accuracy`` ends the run after the first global round
    whose test accuracy reaches it.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    spec = phys.constellation
    M, K0 = spec.num_planes, spec.sats_per_plane
    sats = spec.sat_ids()
    if len(data.train) != len(sats):
        raise ValueError(f"need one dataset per satellite ({len(sats)}), got {len(data.train)}")
    w = data.weights
    w_orbit = orbit_weights(w, M, K0)
    mix = ring_mixing_matrix(K0)

    if init is None:
        init = arch.init(np.random.default_rng([train.seed, 0x5EED]))
    z = np.array(init, dtype=float)
    if z.shape != (arch.size,):
        raise ValueError(f"initial model has shape {z.shape}, expected ({arch.size},)")

    clock = _Clock(phys)
    result = RunResult(algorithm, [], [], ModelVec(z.copy(), 1.0))

    def log_row(r: int, t: int, model: np.ndarray, when: float):
        train_loss = sum(wk * evaluate(model, ds, arch)[0] for wk, ds in zip(w, data.train))
        _, acc = evaluate(model, data.test, arch)
        result.metrics.append(MetricsRow(algorithm, r, t, when, float(train_loss), acc))
        return acc

    log_row(0, 0, z, 0.0)
    if record_trajectory:
        result.trajectory.append(z.copy())
    T = 1 if algorithm == "fedisl" else train.intra_rounds
    E = train.local_steps
    for r in range(train.rounds):
        local = [z.copy() for _ in sats]
        step_time = E * phys.t_comp_s + _aggregation_time(algorithm, phys)
        for t in range(T):
            if record_intra_models:
                result.intra_models.append((r, t, weighted_average(local, w)))
            for i, sat in enumerate(sats):
                local[i] = local_sgd(
                    local[i], data.train[i], E, train.eta, train.batch, sgd_stream(train.seed, sat, r, t), arch
                )
            if algorithm == "fedmega":
                for m in range(M):
                    members = [ModelVec(local[m * K0 + k], w[m * K0 + k]) for k in range(K0)]
                    avg = intra_orbit_average(members)
                    for k in range(K0):
                        local[m * K0 + k] = avg.copy()
            elif algorithm == "hlsgd":
                for m in range(M):
                    mixed = mix @ np.stack(local[m * K0 : (m + 1) * K0])
                    for k in range(K0):
                        local[m * K0 + k] = mixed[k]
            if eval_intra:
                log_row(r, t + 1, weighted_average(local, w), clock.now + (t + 1) * step_time)

        if algorithm == "fedmega":
            orbit_models = [local[m * K0] for m in range(M)]
            z = global_average(orbit_models, w_orbit)
        else:
            z = weighted_average(local, w)

        try:
            entry = _round_ledger(r, algorithm, phys, train, clock)
        except StallError as exc:
            raise StallError(f"round {r}: {exc}", getattr(exc, "next_feasible_s", None)) from exc
        result.ledger.append(entry)
        clock.now += entry.total
        acc = log_row(r + 1, 0, z, clock.now)
        if record_trajectory:
            result.trajectory.append(z.copy())
        if stop_at_accuracy is not None and acc >= stop_at_accuracy:
            break

    result.final_model = ModelVec(z, 1.0)
    return result


def run_fedmega(phys: PhysicalSetup, train: TrainConfig, data: FederatedData, arch: MlpArch = MlpArch(), **kw) -> RunResult:
    return simulate("fedmega", phys, train, data, arch, **kw)


def run_hlsgd(phys: PhysicalSetup, train: TrainConfig, data: FederatedData, arch: MlpArch = MlpArch(), **kw) -> RunResult:
    return simulate("hlsgd", phys, train, data, arch, **kw)


def run_fedisl(phys: PhysicalSetup, train: TrainConfig, data: FederatedData, arch: MlpArch = MlpArch(), **kw) -> RunResult:
    return simulate("fedisl", phys, train, data, arch, **kw)


SCHEMA_HEADER = "# schema_version: 1\n"
METRICS_COLUMNS = ("algorithm", "round", "intra_round", "cum_time_s", "train_loss", "test_acc")
LEDGER_COLUMNS = (
    "round", "t_down", "t_bc", "t_comp", "t_rar", "t_wait", "total",
    "t_up", "T", "E", "t_down_formula", "t_down_measured", "t_up_measured",
)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    lines = [",".join(METRICS_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(getattr(r, c)) for c in METRICS_COLUMNS))
    return SCHEMA_HEADER + "\n".join(lines) + "\n"


def ledger_csv(entries: Sequence[DelayLedger]) -> str:
    """Per-round delay components; ``t_comp`` and ``t_rar`` are the per-round totals."""
    lines = [",".join(LEDGER_COLUMNS)]
    for e in entries:
        vals = {
            "round": e.round, "t_down": e.t_down, "t_bc": e.t_bc, "t_comp": e.t_comp_total,
            "t_rar": e.t_rar_total, "t_wait": e.t_wait, "total": e.total, "t_up": e.t_up,
            "T": e.T, "E": e.E, "t_down_formula": e.t_down_formula,
            "t_down_measured": e.t_down_measured, "t_up_measured": e.t_up_measured,
        }
        lines.append(",".join(_fmt(vals[c]) for c in LEDGER_COLUMNS))
    return SCHEMA_HEADER + "\n".join(lines) + "\n"
