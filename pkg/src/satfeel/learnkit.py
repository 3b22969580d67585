"""Synthetic federated data and a small numpy MLP trained with mini-batch SGD.

Models travel as flat float64 vectors; :class:`MlpArch` knows how to view a
vector as weight matrices. Layout of the flat vector: ``W1, b1, W2, b2``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .constellation import SatId

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class MlpArch:
    """Two-layer perceptron; ``n_hidden = 0`` gives multinomial logistic regression."""

    n_in: int = 60
    n_hidden: int = 20
    n_out: int = 10
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be 'tanh' or 'relu', got {self.activation!r}")

    @property
    def logistic(self) -> bool:
        return self.n_hidden == 0

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        if self.logistic:
            return [(self.n_out, self.n_in), (self.n_out,)]
        return [(self.n_hidden, self.n_in), (self.n_hidden,), (self.n_out, self.n_hidden), (self.n_out,)]

    @property
    def size(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes))

    def views(self, vec: np.ndarray) -> list[np.ndarray]:
        out, i = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(vec[i : i + n].reshape(s))
            i += n
        return out

    def unflatten(self, vec) -> MlpParams:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got shape {vec.shape}")
        parts = [v.copy() for v in self.views(vec)]
        if self.logistic:
            return MlpParams(parts[0], parts[1])
        return MlpParams(*parts)

    def init(self, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
        return rng.normal(0.0, scale, size=self.size)


LOGISTIC = MlpArch(n_hidden=0)


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray | None = None
    b2: np.ndarray | None = None

    def flatten(self) -> np.ndarray:
        parts = [self.W1, self.b1] + ([] if self.W2 is None else [self.W2, self.b2])
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


@dataclass
class LocalDataset:
    features: np.ndarray
    labels: np.ndarray
    owner: SatId | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (D, n_in) and match the label count")
        if self.features.shape[0] < 1:
            raise ValueError("a local dataset needs at least one sample")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class FederatedData:
    train: list[LocalDataset]
    test: LocalDataset
    device_means: np.ndarray | None = None  # u_k, centre of each device's (W, b)
    feature_shifts: np.ndarray | None = None  # B_k, centre of each device's feature mean
    meta: dict = field(default_factory=dict)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(ds) for ds in self.train], dtype=float)

    @property
    def weights(self) -> np.ndarray:
        """Data-size weights ``D_k / sum(D)``."""
        s = self.sizes
        return s / s.sum()

    def pooled(self) -> LocalDataset:
        return LocalDataset(
            np.concatenate([d.features for d in self.train]),
            np.concatenate([d.labels for d in self.train]),
        )


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gen_synthetic(
    alpha: float = 0.5,
    beta: float = 0.5,
    num_devices: int = 20,
    size_range: tuple[int, int] = (50, 450),
    seed: int = 0,
    *,
    test_fraction: float = 0.2,
    n_features: int = 60,
    n_classes: int = 10,
    owners: Sequence[SatId] | None = None,
) -> FederatedData:
    """Heterogeneous synthetic classification data, one generator per device.

    Device ``k`` draws ``u_k ~ N(0, alpha)`` and ``B_k ~ N(0, beta)`` (second
    argument is the standard deviation), a private linear labeller
    ``W_k, b_k ~ N(u_k, 1)``, a feature centre ``v_k ~ N(B_k, 1)`` and samples
    ``x ~ N(v_k, diag(j ** -1.2))`` labelled ``argmax softmax(W_k x + b_k)``.
    Sizes are uniform integers on ``size_range`` (inclusive). Each device
    also produces ``test_fraction`` of extra samples that are pooled into the
    held-out test set.
    """
    if num_devices < 1:
        raise ValueError(f"num_devices must be >= 1, got {num_devices}")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    lo, hi = size_range
    rng = np.random.default_rng(seed)
    u = rng.normal(0.0, alpha, num_devices)
    B = rng.normal(0.0, beta, num_devices)
    cov_sqrt = np.arange(1, n_features + 1, dtype=float) ** (-1.2 / 2)
    sizes = rng.integers(lo, hi + 1, num_devices)

    train, test_x, test_y = [], [], []
    for k in range(num_devices):
        W = rng.normal(u[k], 1.0, (n_classes, n_features))
        b = rng.normal(u[k], 1.0, n_classes)
        v = rng.normal(B[k], 1.0, n_features)
        n_train = int(sizes[k])
        n_test = int(round(n_train * test_fraction / (1.0 - test_fraction)))
        x = v + cov_sqrt * rng.standard_normal((n_train + n_test, n_features))
        y = np.argmax(_softmax(x @ W.T + b), axis=1)
        owner = owners[k] if owners is not None else None
        train.append(LocalDataset(x[:n_train], y[:n_train], owner))
        test_x.append(x[n_train:])
        test_y.append(y[n_train:])
    test = LocalDataset(np.concatenate(test_x), np.concatenate(test_y))
    return FederatedData(
        train,
        test,
        device_means=u,
        feature_shifts=B,
        meta={"generator": "synthetic", "alpha": alpha, "beta": beta, "seed": seed, "sizes": sizes.tolist()},
    )


def label_skew_partition(
    dataset: LocalDataset,
    satellites: Sequence[SatId],
    labels_per_device: int = 2,
    seed: int = 0,
) -> list[LocalDataset]:
    """Give each satellite samples from at most ``labels_per_device`` classes.

    Classes are dealt out round-robin over a seeded permutation so that every
    class present in ``dataset`` has at least one holder; each class's samples
    are then split evenly among its holders. Every input sample ends up on
    exactly one satellite.
    """
    if labels_per_device < 1:
        raise ValueError(f"labels_per_device must be >= 1, got {labels_per_device}")
    classes = np.unique(dataset.labels)
    n_sats = len(satellites)
    if labels_per_device > len(classes):
        raise ValueError(f"requested {labels_per_device} labels per device but only {len(classes)} classes exist")
    if n_sats * labels_per_device < len(classes):
        raise ValueError(
            f"{n_sats} satellites x {labels_per_device} labels cannot cover {len(classes)} classes"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(classes)
    holders: dict[int, list[int]] = {int(c): [] for c in classes}
    owned: list[set[int]] = [set() for _ in range(n_sats)]
    pos = 0
    for s in range(n_sats):
        while len(owned[s]) < labels_per_device:
            c = int(order[pos % len(order)])
            pos += 1
            if c not in owned[s]:
                owned[s].add(c)
                holders[c].append(s)

    buckets: list[list[np.ndarray]] = [[] for _ in range(n_sats)]
    for c, hs in holders.items():
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        for h, part in zip(hs, np.array_split(idx, len(hs))):
            buckets[h].append(part)
    out = []
    for s, sat in enumerate(satellites):
        idx = np.sort(np.concatenate(buckets[s])) if buckets[s] else np.array([], dtype=int)
        if idx.size == 0:
            raise ValueError(f"satellite {tuple(sat)} received no samples; use fewer satellites or more data")
        out.append(LocalDataset(dataset.features[idx], dataset.labels[idx], sat))
    return out


def _as_vector(params, arch: MlpArch) -> np.ndarray:
    if isinstance(params, MlpParams):
        return params.flatten()
    return np.asarray(params, dtype=float)


def forward_loss_grad(params, X: np.ndarray, y: np.ndarray, arch: MlpArch = MlpArch(), *, batch_index=None):
    """Mean cross-entropy of the batch and its exact gradient (flat, same layout as ``params``)."""
    z = _as_vector(params, arch)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    grad = np.empty_like(z)
    gviews = arch.views(grad)
    if arch.logistic:
        W1, b1 = arch.views(z)
        logits = X @ W1.T + b1
    else:
        W1, b1, W2, b2 = arch.views(z)
        pre = X @ W1.T + b1
        act = np.tanh(pre) if arch.activation == "tanh" else np.maximum(pre, 0.0)
        logits = act @ W2.T + b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), y]))
    if not (np.isfinite(loss) and np.all(np.isfinite(logits))):
        where = "" if batch_index is None else f" (batch {batch_index})"
        raise NumericError(f"non-finite loss{where}")
    dlogits = np.exp(shifted - lse[:, None])
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    if arch.logistic:
        np.matmul(dlogits.T, X, out=gviews[0])
        gviews[1][:] = dlogits.sum(axis=0)
    else:
        np.matmul(dlogits.T, act, out=gviews[2])
        gviews[3][:] = dlogits.sum(axis=0)
        dact = dlogits @ W2
        dpre = dact * (1.0 - act * act) if arch.activation == "tanh" else dact * (pre > 0)
        np.matmul(dpre.T, X, out=gviews[0])
        gviews[1][:] = dpre.sum(axis=0)
    return loss, grad


def sgd_stream(seed: int, sat: SatId, round_idx: int, intra_round: int) -> np.random.Generator:
    """Independent random stream for one satellite's local training in one intra-orbit round."""
    return np.random.default_rng([int(seed), int(sat[0]), int(sat[1]), int(round_idx), int(intra_round)])


def sample_batch(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    """Indices of one mini-batch: without replacement, all of them for a full batch,
    with replacement if the batch is larger than the dataset."""
    if batch == n:
        return np.arange(n)
    if batch > n:
        return rng.integers(0, n, size=batch)
    return rng.choice(n, size=batch, replace=False)


def local_sgd(params, data: LocalDataset, E: int, eta: float, batch: int, rng: np.random.Generator,
              arch: MlpArch = MlpArch()) -> np.ndarray:
    if E < 1:
        raise ValueError(f"E must be >= 1, got {E}")
    z = _as_vector(params, arch).copy()
    n = len(data)
    if batch > n:
        log.warning("batch %d exceeds dataset size %d for %s; sampling with replacement", batch, n, data.owner)
    for e in range(E):
        idx = sample_batch(rng, n, batch)
        _, g = forward_loss_grad(z, data.features[idx], data.labels[idx], arch, batch_index=e)
        z -= eta * g
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite parameters after local step {e} on {data.owner}")
    return z


def evaluate(params, test: LocalDataset, arch: MlpArch = MlpArch()) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy on ``test``."""
    z = _as_vector(params, arch)
    if arch.logistic:
        W1, b1 = arch.views(z)
        logits = test.features @ W1.T + b1
    else:
        W1, b1, W2, b2 = arch.views(z)
        pre = test.features @ W1.T + b1
        act = np.tanh(pre) if arch.activation == "tanh" else np.maximum(pre, 0.0)
        logits = act @ W2.T + b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    n = len(test)
    loss = float(np.mean(lse - shifted[np.arange(n), test.labels]))
    acc = float(np.mean(np.argmax(logits, axis=1) == test.labels))
    return loss, acc


def full_gradient(params, datasets: Sequence[LocalDataset], weights: Sequence[float], arch: MlpArch = MlpArch()):
    """Weighted global gradient ``sum_k w_k grad F_k`` and loss, full batch on every device."""
    z = _as_vector(params, arch)
    g = np.zeros_like(z)
    loss = 0.0
    for w, ds in zip(weights, datasets):
        lk, gk = forward_loss_grad(z, ds.features, ds.labels, arch)
        g += w * gk
        loss += w * lk
    return loss, g


CACHE_VERSION = 1


def cached_synthetic(cache_dir, **params) -> FederatedData:
    """``gen_synthetic(**params)`` memoised as a versioned ``.npz`` keyed by the parameters."""
    key_src = json.dumps({"version": CACHE_VERSION, **params}, sort_keys=True, default=list)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:16]
    path = os.path.join(os.fspath(cache_dir), f"synthetic-v{CACHE_VERSION}-{key}.npz")
    if os.path.exists(path):
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) == CACHE_VERSION:
                n = int(z["num_devices"])
                train = [LocalDataset(z[f"x{k}"], z[f"y{k}"]) for k in range(n)]
                return FederatedData(
                    train,
                    LocalDataset(z["test_x"], z["test_y"]),
                    device_means=z["u"],
                    feature_shifts=z["B"],
                    meta=json.loads(str(z["meta"])),
                )
    data = gen_synthetic(**params)
    arrays = {f"x{k}": ds.features for k, ds in enumerate(data.train)}
    arrays.update({f"y{k}": ds.labels for k, ds in enumerate(data.train)})
    os.makedirs(os.fspath(cache_dir), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.fspath(cache_dir), suffix=".npz")
    with os.fdopen(fd, "wb") as fh:
        np.savez(
            fh,
            version=CACHE_VERSION,
            num_devices=len(data.train),
            test_x=data.test.features,
            test_y=data.test.labels,
            u=data.device_means,
            B=data.feature_shifts,
            meta=json.dumps(data.meta),
            **arrays,
        )
    os.replace(tmp, path)
    return data
