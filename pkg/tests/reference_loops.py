"""Directly coded reference algorithms used as oracles for the orchestrator."""
import numpy as np

from satfeel.learnkit import forward_loss_grad, local_sgd, sample_batch, sgd_stream


def sync_sgd(z0, data, sats, rounds, eta, batch, seed, arch):
    """Every satellite takes one mini-batch gradient at the shared model; the server averages gradients."""
    w = data.weights
    z = z0.copy()
    traj = [z.copy()]
    for r in range(rounds):
        g = np.zeros_like(z)
        for i, sat in enumerate(sats):
            ds = data.train[i]
            idx = sample_batch(sgd_stream(seed, sat, r, 0), len(ds), batch)
            g += w[i] * forward_loss_grad(z, ds.features[idx], ds.labels[idx], arch)[1]
        z = z - eta * g
        traj.append(z.copy())
    return traj


def fedavg(z0, data, sats, rounds, E, eta, batch, seed, arch):
    w = data.weights
    z = z0.copy()
    traj = [z.copy()]
    for r in range(rounds):
        acc = np.zeros_like(z)
        for i, sat in enumerate(sats):
            acc += w[i] * local_sgd(z, data.train[i], E, eta, batch, sgd_stream(seed, sat, r, 0), arch)
        z = acc / w.sum()
        traj.append(z.copy())
    return traj


def max_rel_diff(a, b):
    return max(float(np.linalg.norm(x - y) / max(np.linalg.norm(y), 1e-300)) for x, y in zip(a, b))
