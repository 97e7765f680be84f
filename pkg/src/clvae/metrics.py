"""Evaluation metrics: Frechet distance / FID, ROC with AUC, TPR/FPR.

FID here uses :class:`clvae.losses.PerceptualBackbone` features, not Inception,
so values are only comparable with each other, never with published FIDs.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from clvae.datamodel import ANOMALY


class MetricError(ValueError):
    pass


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.n < 2:
            raise MetricError("Gaussian stats need n >= 2")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise MetricError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-10, atol=1e-12):
            raise MetricError("covariance must be symmetric")


def fit_gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance of an (n, d) feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise MetricError("features must be a 2-D (n, d) array")
    if len(x) < 2:
        raise MetricError(f"need at least 2 samples, got {len(x)}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    return GaussianStats(mean, 0.5 * (cov + cov.T), len(x))


def _psd_project(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.clip(w, 0.0, None)) @ v.T


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """Tr((A B)^{1/2}) for symmetric PSD A, B.

    A B shares its eigenvalues with the symmetric A^{1/2} B A^{1/2}, whose
    eigenvalues are clipped at zero before taking square roots.
    """
    ah = _psd_sqrt(a)
    m = ah @ b @ ah
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    diff = a.mean - b.mean
    ca = _psd_project(a.cov)
    cb = _psd_project(b.cov)
    val = diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * trace_sqrt_product(ca, cb)
    return max(float(val), 0.0)


@torch.no_grad()
def backbone_features(images, backbone, batch_size: int = 64) -> np.ndarray:
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    out = [backbone.pooled(x[i:i + batch_size].float()).double() for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy()


def fid(real, generated, backbone, batch_size: int = 64) -> float:
    """Frechet distance between pooled backbone features of two RGB batches (N, 3, H, W)."""
    if len(real) < 2 or len(generated) < 2:
        raise MetricError("FID needs at least 2 images per set")
    fr = fit_gaussian_stats(backbone_features(real, backbone, batch_size))
    fg = fit_gaussian_stats(backbone_features(generated, backbone, batch_size))
    return frechet_distance(fr, fg)


def mse(real, generated) -> float:
    a = np.asarray(real, dtype=np.float64)
    b = np.asarray(generated, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError("shape mismatch")
    return float(np.mean((a - b) ** 2))


# --------------------------------------------------------------------------- ROC


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def points(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def _as_positive(labels) -> np.ndarray:
    return np.array([l == ANOMALY or (not isinstance(l, str) and bool(l)) for l in labels])


def roc_curve(scores, labels) -> RocCurve:
    """ROC sweep with anomaly as the positive class and higher scores more anomalous.

    One point per distinct score (descending), preceded by (0, 0) at threshold
    +inf. Equal scores enter together, so ties contribute a diagonal segment.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = _as_positive(labels)
    if s.shape != pos.shape:
        raise MetricError("scores and labels differ in length")
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both anomaly and normal samples")
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(pos)[last]
    fp = np.cumsum(~pos)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thr = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thr, fpr, tpr, auc)


def tpr_fpr(predicted, true) -> tuple[float, float]:
    p = _as_positive(predicted)
    t = _as_positive(true)
    if p.shape != t.shape:
        raise MetricError("predicted and true labels differ in length")
    if not t.any():
        raise MetricError("TPR undefined: no anomalies among the true labels")
    if t.all():
        raise MetricError("FPR undefined: no normal samples among the true labels")
    tp = np.sum(p & t)
    fn = np.sum(~p & t)
    fp = np.sum(p & ~t)
    tn = np.sum(~p & ~t)
    return float(tp / (tp + fn)), float(fp / (fp + tn))


def accuracy(predicted, true) -> float:
    p, t = _as_positive(predicted), _as_positive(true)
    if len(t) == 0:
        raise MetricError("empty label list")
    return float(np.mean(p == t))


def format_rate_table(rows: dict) -> str:
    """Rows of rates keyed by a setting (e.g. beta), printed like ``FPR 0.3557 | TPR 1``."""
    lines = []
    for key, (tpr, fpr) in rows.items():
        lines.append(f"{key}\tFPR {fpr:.4f}\tTPR {tpr:.4g}")
    return "\n".join(lines)


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in curve.points():
            w.writerow([repr(t), repr(f), repr(p)])


@dataclass
class MetricsReport:
    fid: float | None
    mse: float | None
    auroc: float | None
    tpr: float | None
    fpr: float | None
    config_hash: str
    accuracy: float | None = None

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))
