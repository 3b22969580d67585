"""Slot-by-slot model transfer between orbits and the ground via max flow.

Every slot the parameter server builds a graph

    s -> O_m -> S_{m,k} -> GS_g -> d

whose source edges carry the still-untransferred fraction of each orbit's
model, solves a max-flow problem on it and charges the resulting per-orbit
flow against the pending fractions. The loop ends once every orbit is done.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from .channel import LinkBudget, gsl_capacity_fraction, gsl_rate_bps
from .constellation import GslLink, SatId

log = logging.getLogger(__name__)

FLOW_EPS = 1e-12
SOURCE = "s"
SINK = "d"


def orbit_node(m: int) -> str:
    return f"O{m}"


def sat_node(sat: SatId) -> str:
    return f"S{sat.orbit}_{sat.slot}"


def gs_node(g: int) -> str:
    return f"GS{g}"


class StallError(RuntimeError):
    """No progress within the configured horizon (no feasible GSL to use)."""

    def __init__(self, message: str, next_feasible_s: float | None = None):
        super().__init__(message)
        self.next_feasible_s = next_feasible_s


@dataclass
class FlowGraph:
    """Directed graph with named nodes; node order fixes BFS tie-breaking."""

    nodes: list[str] = field(default_factory=list)
    edges: list[tuple[int, int, float]] = field(default_factory=list)
    source: int = 0
    sink: int = 0

    def __post_init__(self):
        self._index = {name: i for i, name in enumerate(self.nodes)}
        self._pairs = {(u, v) for u, v, _ in self.edges}

    def add_node(self, name: str) -> int:
        if name in self._index:
            raise ValueError(f"duplicate node {name!r}")
        self._index[name] = len(self.nodes)
        self.nodes.append(name)
        return self._index[name]

    def index(self, name: str) -> int:
        return self._index[name]

    def add_edge(self, u: int | str, v: int | str, cap: float) -> None:
        u = self._index[u] if isinstance(u, str) else u
        v = self._index[v] if isinstance(v, str) else v
        if cap < 0:
            raise ValueError(f"negative capacity on {self.nodes[u]}->{self.nodes[v]}")
        if u == v:
            raise ValueError(f"self loop on {self.nodes[u]}")
        if (u, v) in self._pairs:
            raise ValueError(f"duplicate edge {self.nodes[u]}->{self.nodes[v]}")
        self._pairs.add((u, v))
        self.edges.append((u, v, float(cap)))

    def capacity(self, u: str, v: str) -> float:
        iu, iv = self._index[u], self._index[v]
        for a, b, c in self.edges:
            if a == iu and b == iv:
                return c
        raise KeyError(f"no edge {u}->{v}")


@dataclass
class FlowAssignment:
    graph: FlowGraph
    flows: list[float]
    total_flow: float

    def flow(self, u: str, v: str) -> float:
        iu, iv = self.graph.index(u), self.graph.index(v)
        for (a, b, _), f in zip(self.graph.edges, self.flows):
            if a == iu and b == iv:
                return f
        raise KeyError(f"no edge {u}->{v}")

    def edge_records(self) -> list[dict]:
        names = self.graph.nodes
        return [
            {"from": names[u], "to": names[v], "cap": c, "flow": f}
            for (u, v, c), f in zip(self.graph.edges, self.flows)
        ]


def build_flow_graph(
    pending: Sequence[float],
    gsl_caps: Iterable[tuple[SatId, int, float]],
    gdl_caps: Sequence[float] | None = None,
    *,
    num_stations: int | None = None,
    sats_per_plane: int | None = None,
) -> FlowGraph:
    """Per-slot transfer graph.

    Args:
        pending: remaining fraction of each orbit's model, each in [0, 1].
        gsl_caps: ``(sat, station, capacity)`` for every feasible GSL; capacities
            are clamped to 1 (one whole model per slot).
        gdl_caps: ground-line capacity per station. ``None`` means effectively
            unbounded: the sum of the station's incident GSL capacities plus one.
        num_stations: number of GS nodes; inferred from the other inputs if omitted.
        sats_per_plane: if given, every satellite gets a node even without a GSL.
    """
    gsl_caps = [(SatId(*sat), int(g), float(c)) for sat, g, c in gsl_caps]
    M = len(pending)
    for m, p in enumerate(pending):
        if not 0.0 <= p <= 1.0 + FLOW_EPS:
            raise ValueError(f"pending fraction of orbit {m} outside [0, 1]: {p}")
    seen = set()
    for sat, g, c in gsl_caps:
        if (sat, g) in seen:
            raise ValueError(f"duplicate GSL {tuple(sat)} -> GS{g}")
        seen.add((sat, g))
        if not 0 <= sat.orbit < M:
            raise ValueError(f"GSL from unknown orbit {sat.orbit}")
        if c < 0:
            raise ValueError(f"negative GSL capacity {c}")
    G = num_stations
    if G is None:
        G = max([g + 1 for _, g, _ in gsl_caps] + [len(gdl_caps) if gdl_caps is not None else 0])

    if sats_per_plane is not None:
        sats = [SatId(m, k) for m in range(M) for k in range(sats_per_plane)]
    else:
        sats = sorted({sat for sat, _, _ in gsl_caps})

    graph = FlowGraph()
    graph.add_node(SOURCE)
    for m in range(M):
        graph.add_node(orbit_node(m))
    for sat in sats:
        graph.add_node(sat_node(sat))
    for g in range(G):
        graph.add_node(gs_node(g))
    graph.add_node(SINK)
    graph.source, graph.sink = graph.index(SOURCE), graph.index(SINK)

    for m in range(M):
        graph.add_edge(SOURCE, orbit_node(m), min(max(float(pending[m]), 0.0), 1.0))
    for sat in sats:
        graph.add_edge(orbit_node(sat.orbit), sat_node(sat), 1.0)
    incident = [0.0] * G
    for sat, g, c in sorted(gsl_caps):
        c = min(c, 1.0)
        graph.add_edge(sat_node(sat), gs_node(g), c)
        incident[g] += c
    for g in range(G):
        cap = incident[g] + 1.0 if gdl_caps is None else float(gdl_caps[g])
        graph.add_edge(gs_node(g), SINK, cap)
    return graph


def max_flow(graph: FlowGraph) -> FlowAssignment:
    """Edmonds-Karp: repeatedly augment along a shortest residual path.

    Neighbours are scanned in ascending node index so ties between equally
    short paths resolve the same way every time. Residual capacities at or
    below ``FLOW_EPS`` count as saturated.
    """
    n = len(graph.nodes)
    # residual arcs: 2e is the forward copy of edge e, 2e+1 its reverse
    head: list[int] = []
    resid: list[float] = []
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v, c in graph.edges:
        adj[u].append(len(head))
        head.append(v)
        resid.append(c)
        adj[v].append(len(head))
        head.append(u)
        resid.append(0.0)
    for u in range(n):
        adj[u].sort(key=lambda a: (head[a], a))

    s, t = graph.source, graph.sink
    total = 0.0
    if n and s != t:
        while True:
            parent_arc = [-1] * n
            seen = [False] * n
            seen[s] = True
            queue = deque([s])
            while queue and not seen[t]:
                u = queue.popleft()
                for a in adj[u]:
                    v = head[a]
                    if not seen[v] and resid[a] > FLOW_EPS:
                        seen[v] = True
                        parent_arc[v] = a
                        queue.append(v)
            if not seen[t]:
                break
            bottleneck = float("inf")
            v = t
            while v != s:
                a = parent_arc[v]
                bottleneck = min(bottleneck, resid[a])
                v = head[a ^ 1]
            v = t
            while v != s:
                a = parent_arc[v]
                resid[a] -= bottleneck
                resid[a ^ 1] += bottleneck
                v = head[a ^ 1]
            total += bottleneck

    flows = []
    for e, (_, _, c) in enumerate(graph.edges):
        f = resid[2 * e + 1]
        flows.append(min(max(f, 0.0), c))
    return FlowAssignment(graph=graph, flows=flows, total_flow=total)


class LinkProvider(Protocol):
    """Anything that can list the feasible GSLs of an absolute slot index."""

    def links(self, slot: int) -> list[GslLink]: ...


@dataclass
class TransferResult:
    direction: str
    start_slot: int
    slots_used: int
    total_time_s: float
    access_charges: int
    assignments: list[tuple[int, FlowAssignment]] = field(default_factory=list)
    pending_trace: list[list[float]] = field(default_factory=list)

    def jsonl(self) -> str:
        lines = []
        for slot, fa in self.assignments:
            lines.append(json.dumps({"slot": slot, "edges": fa.edge_records(), "total_flow": fa.total_flow}))
        return "\n".join(lines) + ("\n" if lines else "")


def schedule_transfer(
    pending: Sequence[float],
    provider: LinkProvider,
    slot_s: float,
    model_bytes: float,
    budget: LinkBudget,
    *,
    direction: str = "down",
    start_slot: int = 0,
    num_stations: int | None = None,
    gdl_caps: Sequence[float] | None = None,
    access_policy: str = "per_contact",
    horizon_slots: int = 86400,
    keep_assignments: bool = True,
    reference_distance_km: float | None = None,
) -> TransferResult:
    """Move every orbit's pending model fraction across the GSLs, one slot at a time.

    ``direction`` only labels the result: reversing every edge of the graph
    leaves the max-flow value unchanged, so uploads reuse the download graph.

    Access time follows ``access_policy``: ``"per_contact"`` charges
    ``budget.access_time_s`` each time a (satellite, station) pair starts
    carrying flow after a slot without it, ``"per_transfer"`` charges it once,
    ``"none"`` never.
    """
    if not slot_s > 0:
        raise ValueError(f"slot length must be > 0, got {slot_s}")
    if direction not in ("down", "up"):
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    if access_policy not in ("per_contact", "per_transfer", "none"):
        raise ValueError(f"unknown access policy {access_policy!r}")
    remaining = [min(max(float(p), 0.0), 1.0) for p in pending]
    M = len(remaining)

    result = TransferResult(direction, start_slot, 0, 0.0, 0)
    active_prev: set[tuple[SatId, int]] = set()
    slot = start_slot
    idle = 0
    while any(p > FLOW_EPS for p in remaining):
        links = provider.links(slot)
        useful = [ln for ln in links if remaining[ln.sat.orbit] > FLOW_EPS]
        active_now: set[tuple[SatId, int]] = set()
        if useful:
            caps = []
            for ln in useful:
                if reference_distance_km is not None:
                    rate = gsl_rate_bps(reference_distance_km, budget)
                else:
                    rate = gsl_rate_bps(max(ln.distance_km, 1e-9), budget)
                caps.append((ln.sat, ln.station, gsl_capacity_fraction(rate, slot_s, model_bytes)))
            G = num_stations if num_stations is not None else max(ln.station for ln in links) + 1
            graph = build_flow_graph(remaining, caps, gdl_caps, num_stations=G)
            fa = max_flow(graph)
            for m in range(M):
                f = fa.flow(SOURCE, orbit_node(m))
                remaining[m] = 0.0 if remaining[m] - f <= FLOW_EPS else remaining[m] - f
            for ln in useful:
                if fa.flow(sat_node(ln.sat), gs_node(ln.station)) > FLOW_EPS:
                    active_now.add((ln.sat, ln.station))
            if keep_assignments:
                result.assignments.append((slot, fa))
            progressed = fa.total_flow > FLOW_EPS
        else:
            progressed = False

        if access_policy == "per_contact":
            result.access_charges += len(active_now - active_prev)
        elif access_policy == "per_transfer" and active_now and result.access_charges == 0:
            result.access_charges = 1
        active_prev = active_now
        result.pending_trace.append(list(remaining))
        slot += 1
        if progressed:
            idle = 0
            continue
        idle += 1
        jump = getattr(provider, "next_slot_with_links", None)
        if jump is not None and any(p > FLOW_EPS for p in remaining):
            orbits = [m for m in range(M) if remaining[m] > FLOW_EPS]
            nxt = jump(slot, orbits, horizon_slots - idle + 1)
            target = slot + (horizon_slots - idle + 1) if nxt is None else nxt
            idle += target - slot
            slot = target
            active_prev = set()
        if idle > horizon_slots:
            nxt_s = None
            if jump is not None:
                found = jump(slot, [m for m in range(M) if remaining[m] > FLOW_EPS], 10 * horizon_slots)
                nxt_s = None if found is None else found * slot_s
            raise StallError(
                f"{direction} transfer made no progress for {idle} slots starting at slot "
                f"{slot - idle}; pending={[round(p, 6) for p in remaining]}; "
                f"next feasible GSL at {'unknown' if nxt_s is None else f'{nxt_s:.0f} s'}",
                next_feasible_s=nxt_s,
            )

    result.slots_used = slot - start_slot
    result.total_time_s = result.slots_used * slot_s + result.access_charges * budget.access_time_s
    return result
