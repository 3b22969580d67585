"""Step-size rule, convergence-bound evaluators, constant estimation and the T sweep."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .learnkit import LOGISTIC, FederatedData, LocalDataset, MlpArch, forward_loss_grad, full_gradient, sample_batch
from .orchestrator import PhysicalSetup, TrainConfig, run_fedmega


class StepsizeError(ValueError):
    """Step size above the admissible maximum for the bound."""


@dataclass(frozen=True)
class BoundParams:
    L: float
    sigma2: float
    delta_bar2: float
    alpha: float
    beta: float
    F0_gap: float
    K: int
    M: int
    E: int
    T: int
    R: int
    eta: float

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError(f"L must be > 0, got {self.L}")
        if not self.alpha >= 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        for name in ("beta", "sigma2", "delta_bar2", "F0_gap"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("K", "M", "E", "T", "R"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")


def max_stepsize(p: BoundParams) -> float:
    E, T, L, a = p.E, p.T, p.L, p.alpha
    if T == 1 and E == 1:
        return 1.0 / (2 * L * E)
    if T == 1:
        return 1.0 / (8 * L * math.sqrt(5.0 / 3.0 * a * E * (E - 1)))
    return 1.0 / (8 * E * L * math.sqrt(3 * a * T * (T - 1)))


@dataclass(frozen=True)
class BoundTerms:
    optimality_gap: float
    orbit_variance: float
    local_drift: float
    heterogeneity: float
    variance: float

    @property
    def total(self) -> float:
        return self.optimality_gap + self.orbit_variance + self.local_drift + self.heterogeneity + self.variance


def theorem1_terms(p: BoundParams, *, check: bool = True) -> BoundTerms:
    """Itemized bound on the average squared global gradient norm over ``R*T`` aggregation points.

    ``check=False`` skips the step-size precondition (for scaling studies where
    ``eta`` is set by a different rule).
    """
    if check:
        eta_max = max_stepsize(p)
        if p.eta > eta_max:
            raise StepsizeError(f"eta={p.eta:.6g} exceeds the admissible maximum {eta_max:.6g}")
    eta, L, E, T, R, K, M = p.eta, p.L, p.E, p.T, p.R, p.K, p.M
    return BoundTerms(
        optimality_gap=4 * p.F0_gap / (eta * E * T * R),
        orbit_variance=160 / (3 * K) * eta**3 * L**3 * E * (M - 1) * (T - 1) * p.sigma2,
        local_drift=16 * eta**2 * L**2 * (E - 1) * (p.sigma2 + 6 * p.delta_bar2),
        heterogeneity=32 / 3 * eta**2 * L**2 * E * p.beta * (5 * E * T * (T - 1) + 9 * (E - 1)),
        variance=4 / K * eta * L * p.sigma2,
    )


def theorem1_bound(p: BoundParams, *, check: bool = True) -> float:
    return theorem1_terms(p, check=check).total


def tuned_stepsize(L: float, K: int, E: int, T: int, R: int) -> float:
    return math.sqrt(K / (E * T * R)) / L


def tuned_bound_terms(p: BoundParams) -> dict:
    """Bound terms along ``eta = sqrt(K / (ETR)) / L``; the first and last decay as ``1/sqrt(KETR)``."""
    eta = tuned_stepsize(p.L, p.K, p.E, p.T, p.R)
    terms = theorem1_terms(replace(p, eta=eta), check=False)
    dominant = terms.optimality_gap + terms.variance
    return {
        "eta": eta,
        "terms": asdict(terms),
        "total": terms.total,
        "dominant": dominant,
        # same quantity in closed form: 4 (L F0_gap + sigma^2) / sqrt(K E T R)
        "dominant_closed_form": 4 * (p.L * p.F0_gap + p.sigma2) / math.sqrt(p.K * p.E * p.T * p.R),
    }


def bound_report(p: BoundParams, *, estimated: bool = False) -> dict:
    eta_max = max_stepsize(p)
    terms = theorem1_terms(p, check=False)
    return {
        "schema_version": 1,
        "params": asdict(p),
        "constants_are_estimates": estimated,
        "eta_max": eta_max,
        "eta_admissible": p.eta <= eta_max,
        "terms": asdict(terms),
        "bound": terms.total,
        "tuned_stepsize": tuned_bound_terms(p),
    }


# -- constant estimation -------------------------------------------------------------


@dataclass(frozen=True)
class ConstantEstimates:
    L: float
    sigma2: float
    delta_bar2: float
    alpha: float
    beta: float
    F0_gap: float
    delta2_per_orbit: tuple[float, ...] = ()

    def inflated(self, factor: float) -> "ConstantEstimates":
        return ConstantEstimates(
            L=self.L * factor,
            sigma2=self.sigma2 * factor,
            delta_bar2=self.delta_bar2 * factor,
            alpha=self.alpha * factor,
            beta=self.beta * factor,
            F0_gap=self.F0_gap * factor,
            delta2_per_orbit=tuple(d * factor for d in self.delta2_per_orbit),
        )

    def bound_params(self, *, K: int, M: int, E: int, T: int, R: int, eta: float) -> BoundParams:
        return BoundParams(
            L=self.L,
            sigma2=self.sigma2,
            delta_bar2=self.delta_bar2,
            alpha=max(1.0, self.alpha),
            beta=self.beta,
            F0_gap=self.F0_gap,
            K=K,
            M=M,
            E=E,
            T=T,
            R=R,
            eta=eta,
        )


def _grad(x: np.ndarray, ds: LocalDataset, arch: MlpArch) -> np.ndarray:
    return forward_loss_grad(x, ds.features, ds.labels, arch)[1]


def _local_curvature(x, ds, arch, rng, iters: int, h: float) -> float:
    """Largest Hessian eigenvalue magnitude by power iteration on finite-difference Hessian-vector products."""
    g0 = _grad(x, ds, arch)
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = (_grad(x + h * v, ds, arch) - g0) / h
        lam = float(np.linalg.norm(hv))
        if lam == 0.0:
            break
        v = hv / lam
    return lam


def estimate_constants(
    data: FederatedData,
    num_planes: int,
    points: Sequence[np.ndarray],
    *,
    arch: MlpArch = LOGISTIC,
    batch: int = 25,
    n_batches: int = 20,
    power_iters: int = 15,
    seed: int = 0,
    f_inf: float = 0.0,
) -> ConstantEstimates:
    """Empirical smoothness, variance and dissimilarity constants at the given iterates.

    Each constant is the worst case over ``points`` (and over satellites where
    the definition asks for it). ``F0_gap`` uses ``points[0]`` as the initial
    model and ``f_inf`` as the lower bound of the loss (0 for cross-entropy).
    """
    if not points:
        raise ValueError("need at least one iterate to probe")
    datasets = data.train
    n = len(datasets)
    if n % num_planes:
        raise ValueError(f"{n} satellites do not split evenly into {num_planes} orbits")
    K0 = n // num_planes
    w = np.asarray(data.weights)
    rng = np.random.default_rng([seed, 0xC0])

    L = 0.0
    sigma2 = 0.0
    delta2 = np.zeros(num_planes)
    xs, ys = [], []
    for x in points:
        x = np.asarray(x, dtype=float)
        grads = np.stack([_grad(x, ds, arch) for ds in datasets])
        for i, ds in enumerate(datasets):
            L = max(L, _local_curvature(x, ds, arch, rng, power_iters, 1e-4))
            if batch < len(ds):
                dev = []
                for _ in range(n_batches):
                    idx = sample_batch(rng, len(ds), batch)
                    g = forward_loss_grad(x, ds.features[idx], ds.labels[idx], arch)[1]
                    dev.append(float(np.sum((g - grads[i]) ** 2)))
                sigma2 = max(sigma2, float(np.mean(dev)))
        orbit_grads = []
        for m in range(num_planes):
            sl = slice(m * K0, (m + 1) * K0)
            wm = w[sl] / w[sl].sum()
            gm = wm @ grads[sl]
            orbit_grads.append(gm)
            delta2[m] = max(delta2[m], float(np.mean(np.sum((grads[sl] - gm) ** 2, axis=1))))
        g = w @ grads
        xs.append(float(g @ g))
        ys.append(float(np.mean([gm @ gm for gm in orbit_grads])))

    xs_a, ys_a = np.array(xs), np.array(ys)
    if xs_a.size > 1 and np.ptp(xs_a) > 0:
        slope = float(np.polyfit(xs_a, ys_a, 1)[0])
    else:
        slope = 1.0
    alpha = max(1.0, slope)
    beta = max(0.0, float(np.max(ys_a - alpha * xs_a)))

    f0, _ = full_gradient(np.asarray(points[0], dtype=float), datasets, w, arch)
    return ConstantEstimates(
        L=L,
        sigma2=sigma2,
        delta_bar2=float(delta2.mean()),
        alpha=alpha,
        beta=beta,
        F0_gap=max(0.0, float(f0) - f_inf),
        delta2_per_orbit=tuple(float(d) for d in delta2),
    )


def average_grad_norm2(models: Sequence[np.ndarray], data: FederatedData, arch: MlpArch = LOGISTIC) -> float:
    """Mean of ``||grad F(z)||^2`` (full-batch global gradient) over the given models."""
    vals = []
    for z in models:
        _, g = full_gradient(z, data.train, data.weights, arch)
        vals.append(float(g @ g))
    return float(np.mean(vals))


# -- intra-orbit round count sweep ----------------------------------------------------------


@dataclass
class SweepRow:
    T: int
    target_acc: float
    time_s: float
    reached: bool


def tradeoff_sweep(
    T_values: Sequence[int],
    targets: Sequence[float],
    phys: PhysicalSetup,
    train: TrainConfig,
    data: FederatedData,
    arch: MlpArch = MlpArch(),
) -> list[SweepRow]:
    """Simulated time for FedMega to first reach each target accuracy, per intra-orbit round count."""
    rows = []
    stop = max(targets) if targets else None
    for T in T_values:
        res = run_fedmega(phys, replace(train, intra_rounds=T), data, arch, stop_at_accuracy=stop)
        for target in targets:
            t = res.time_to_accuracy(target)
            rows.append(SweepRow(T, target, t, math.isfinite(t)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write("# schema_version: 1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "target_acc", "time_s", "reached"])
    for r in rows:
        w.writerow([r.T, repr(r.target_acc), repr(r.time_s) if r.reached else "", int(r.reached)])
    return buf.getvalue()
