"""Intra-orbit aggregation by full-duplex ring all-reduce.

Each of the ``K`` satellites cuts its (weight-scaled) model into ``2K``
chunks: ``K`` travel clockwise, ``K`` counter-clockwise. After ``K - 1``
reduce iterations satellite ``k`` holds the complete sum of clockwise chunk
``k + 1`` and counter-clockwise chunk ``k - 1``; ``K - 1`` gather iterations
then circulate the completed chunks so that every satellite ends with the
whole averaged model.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .channel import IslSpec, transmit_time_s

CW = "cw"
CCW = "ccw"


class RingTooSmall(ValueError):
    pass


@dataclass
class ModelVec:
    values: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("model vector must be one-dimensional")
        if not self.weight >= 0:
            raise ValueError(f"weight must be >= 0, got {self.weight}")

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class ChunkLayout:
    K: int
    d: int
    d_padded: int

    @property
    def chunk_len(self) -> int:
        return self.d_padded // (2 * self.K)

    def plus_range(self, u: int) -> tuple[int, int]:
        c = self.chunk_len
        return 2 * u * c, (2 * u + 1) * c

    def minus_range(self, u: int) -> tuple[int, int]:
        c = self.chunk_len
        return (2 * u + 1) * c, (2 * u + 2) * c

    @property
    def boundaries(self) -> list[tuple[int, int]]:
        """All ``2K`` ranges in storage order: plus-0, minus-0, plus-1, ..."""
        out = []
        for u in range(self.K):
            out.append(self.plus_range(u))
            out.append(self.minus_range(u))
        return out


def make_layout(d: int, K: int) -> ChunkLayout:
    if K < 2:
        raise RingTooSmall(f"ring all-reduce needs at least 2 satellites, got K={K}")
    if d < 1:
        raise ValueError(f"model length must be >= 1, got {d}")
    n = 2 * K
    d_padded = -(-d // n) * n
    return ChunkLayout(K=K, d=d, d_padded=d_padded)


class Transmission(NamedTuple):
    iteration: int
    sender: int
    receiver: int
    direction: str
    chunk: int
    phase: str  # "reduce" or "gather"


@dataclass
class AllReduceResult:
    outputs: list[np.ndarray]
    iterations: int
    schedule: list[Transmission] = field(default_factory=list)

    @property
    def result(self) -> np.ndarray:
        return self.outputs[0]

    def schedule_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "sender", "receiver", "direction", "chunk", "phase"])
        w.writerows(self.schedule)
        return buf.getvalue()


def _check_models(models: Sequence[ModelVec], K: int, d: int):
    if len(models) != K:
        raise ValueError(f"expected {K} models for the ring, got {len(models)}")
    for i, mv in enumerate(models):
        if len(mv) != d:
            raise ValueError(f"model {i} has length {len(mv)}, layout expects {d}")
        if not np.all(np.isfinite(mv.values)):
            raise ValueError(f"model {i} has non-finite entries")
    total = float(sum(mv.weight for mv in models))
    if not total > 0:
        raise ValueError("ring weights sum to zero")
    return total


def ring_allreduce(models: Sequence[ModelVec], layout: ChunkLayout, *, record: bool = True) -> AllReduceResult:
    """Weighted intra-orbit average via full-duplex ring all-reduce.

    Satellite ``k`` sends clockwise chunk ``(k - i) mod K`` to ``k + 1`` and
    counter-clockwise chunk ``(k + i) mod K`` to ``k - 1`` in iteration
    ``i``; receivers accumulate during the first ``K - 1`` iterations and
    overwrite afterwards. Every satellite's output equals
    ``sum(w_k z_k) / sum(w_k)`` up to rounding.
    """
    K, d = layout.K, layout.d
    total = _check_models(models, K, d)
    c = layout.chunk_len

    # plus[k, u] / minus[k, u]: satellite k's copy of chunk u, pre-scaled by w_k / sum(w)
    plus = np.zeros((K, K, c))
    minus = np.zeros((K, K, c))
    for k, mv in enumerate(models):
        z = np.zeros(layout.d_padded)
        z[:d] = mv.values
        blocks = (mv.weight / total * z).reshape(K, 2, c)
        plus[k] = blocks[:, 0, :]
        minus[k] = blocks[:, 1, :]

    schedule: list[Transmission] = []
    ks = np.arange(K)
    for i in range(2 * K - 2):
        reduce_phase = i < K - 1
        # every satellite transmits simultaneously: read all sends before any write
        cw_idx = (ks - i) % K
        ccw_idx = (ks + i) % K
        cw_sent = plus[ks, cw_idx].copy()
        ccw_sent = minus[ks, ccw_idx].copy()
        if record:
            phase = "reduce" if reduce_phase else "gather"
            for k in range(K):
                schedule.append(Transmission(i, k, (k + 1) % K, CW, int(cw_idx[k]), phase))
                schedule.append(Transmission(i, k, (k - 1) % K, CCW, int(ccw_idx[k]), phase))
        for k in range(K):
            left = (k - 1) % K
            right = (k + 1) % K
            u_cw = (k - 1 - i) % K  # what the left neighbour sent
            u_ccw = (k + 1 + i) % K  # what the right neighbour sent
            if reduce_phase:
                plus[k, u_cw] = plus[k, u_cw] + cw_sent[left]
                minus[k, u_ccw] = minus[k, u_ccw] + ccw_sent[right]
            else:
                plus[k, u_cw] = cw_sent[left]
                minus[k, u_ccw] = ccw_sent[right]

    outputs = []
    for k in range(K):
        z = np.stack([plus[k], minus[k]], axis=1).reshape(-1)
        outputs.append(z[:d].copy())
    return AllReduceResult(outputs=outputs, iterations=2 * K - 2, schedule=schedule)


def ring_allreduce_half_duplex(models: Sequence[ModelVec], *, record: bool = True) -> AllReduceResult:
    """Textbook one-direction ring all-reduce with ``K`` chunks and ``2K - 2`` iterations.

    Kept for comparison with the full-duplex variant; each satellite sends a
    single chunk clockwise per iteration.
    """
    K = len(models)
    if K < 2:
        raise RingTooSmall(f"ring all-reduce needs at least 2 satellites, got K={K}")
    d = len(models[0])
    total = _check_models(models, K, d)
    c = -(-d // K)
    buf = np.zeros((K, K, c))
    for k, mv in enumerate(models):
        z = np.zeros(K * c)
        z[:d] = mv.weight / total * mv.values
        buf[k] = z.reshape(K, c)

    schedule: list[Transmission] = []
    ks = np.arange(K)
    for i in range(2 * K - 2):
        reduce_phase = i < K - 1
        idx = (ks - i) % K
        sent = buf[ks, idx].copy()
        for k in range(K):
            if record:
                schedule.append(
                    Transmission(i, k, (k + 1) % K, CW, int(idx[k]), "reduce" if reduce_phase else "gather")
                )
            left = (k - 1) % K
            u = (k - 1 - i) % K
            buf[k, u] = buf[k, u] + sent[left] if reduce_phase else sent[left]
    outputs = [buf[k].reshape(-1)[:d].copy() for k in range(K)]
    return AllReduceResult(outputs=outputs, iterations=2 * K - 2, schedule=schedule)


def intra_orbit_average(models: Sequence[ModelVec]) -> np.ndarray:
    """Weighted orbit average; single-satellite orbits bypass the ring."""
    if len(models) == 1:
        return np.array(models[0].values, dtype=float)
    layout = make_layout(len(models[0]), len(models))
    return ring_allreduce(models, layout, record=False).result


def rar_time_s(K: int, model_bytes: float, isl: IslSpec, hop_rates: Sequence[float] | None = None) -> float:
    """Ring all-reduce duration: ``(2K-2)/(2K) * I / rate + (2K-2) * t_sum``.

    With per-hop rates the slowest hop paces the whole ring.
    """
    if K < 2:
        raise RingTooSmall(f"ring all-reduce needs at least 2 satellites, got K={K}")
    rate = isl.rate_bytes_per_s if hop_rates is None else min(hop_rates)
    return (2 * K - 2) / (2 * K) * transmit_time_s(model_bytes, rate) + (2 * K - 2) * isl.sum_time_s
