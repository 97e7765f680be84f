"""Independent reference implementations, written as plain loops over Python floats."""
from __future__ import annotations

import itertools
import math

import numpy as np
import torch


def recon_loop(x, y):
    x, y = np.asarray(x, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel()
    s = 0.0
    for a, b in zip(x.tolist(), y.tolist()):
        s += (b - a) ** 2
    return s / len(x)


def recon_sum_loop(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    total = 0.0
    for i in range(x.shape[0]):
        for a, b in zip(x[i].ravel().tolist(), y[i].ravel().tolist()):
            total += (b - a) ** 2
    return total / x.shape[0]


def distance_loop(m1, m2):
    s = 0.0
    for a, b in zip(np.ravel(m1).tolist(), np.ravel(m2).tolist()):
        s += abs(a - b)
    return -s


def cluster_loop(z, means):
    z, means = np.asarray(z, dtype=np.float64), np.asarray(means, dtype=np.float64)
    total = 0.0
    for i in range(z.shape[0]):
        for a, b in zip(z[i].ravel().tolist(), means[i].ravel().tolist()):
            total += (b - a) ** 2
    return total / z.shape[0]


def mean_loop(values):
    s, n = 0.0, 0
    for v in np.ravel(values).tolist():
        s += v
        n += 1
    return s / n


def kl_monte_carlo(mu, logvar, m, n_samples, seed=0):
    """E_q[log q(z) - log p(z)] for diagonal Gaussians, by sampling q."""
    rng = np.random.default_rng(seed)
    mu, logvar, m = (np.asarray(a, dtype=np.float64).ravel() for a in (mu, logvar, m))
    sd = np.exp(0.5 * logvar)
    total = 0.0
    chunk = 100_000
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        eps = rng.standard_normal((k, mu.size))
        z = mu + sd * eps
        log_q = -0.5 * (eps ** 2 + logvar + math.log(2 * math.pi))
        log_p = -0.5 * ((z - m) ** 2 + math.log(2 * math.pi))
        total += float((log_q - log_p).sum())
        done += k
    return total / n_samples


def mann_whitney_auc(scores, positive):
    """P(score_pos > score_neg) + 0.5 P(equal), over all pairs."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    win = 0.0
    for a in pos:
        for b in neg:
            win += 1.0 if a > b else 0.5 if a == b else 0.0
    return win / (len(pos) * len(neg))


def best_two_partition(points):
    """Exhaustive minimum within-cluster SSE over all 2-partitions; returns a 0/1 label tuple."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    best, best_labels = math.inf, None
    for bits in itertools.product((0, 1), repeat=n - 1):
        labels = (0,) + bits
        if len(set(labels)) < 2:
            continue
        sse = 0.0
        for k in (0, 1):
            pts = points[[i for i in range(n) if labels[i] == k]]
            sse += float(((pts - pts.mean(axis=0)) ** 2).sum())
        if sse < best:
            best, best_labels = sse, labels
    return best_labels


def finite_difference_check(fn, params: torch.Tensor, n_coords: int = 10, h: float = 1e-5, seed: int = 0):
    """Max relative error between autograd and central differences on a random slice of ``params``."""
    params = params.detach().clone().double().requires_grad_(True)
    out = fn(params)
    (grad,) = torch.autograd.grad(out, params)
    flat = params.detach().view(-1)
    idx = np.random.default_rng(seed).choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    worst = 0.0
    for i in idx.tolist():
        with torch.no_grad():
            p_plus = flat.clone()
            p_plus[i] += h
            p_minus = flat.clone()
            p_minus[i] -= h
            f_plus = float(fn(p_plus.view_as(params)))
            f_minus = float(fn(p_minus.view_as(params)))
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(grad.view(-1)[i])
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
