"""Training objectives for the conditioned VAE.

All functions take torch tensors and return 0-d tensors so they compose into a
differentiable total. Shapes are checked eagerly; broadcasting is never relied on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F


class LossError(ValueError):
    pass


class NonFiniteLoss(LossError):
    pass


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise LossError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.01
    w_distance: float = 0.0
    w_cluster: float = 0.0
    w_perceptual: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and nonnegative, got {v}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted components plus the weighted total."""

    recon: float
    kl: float
    distance: float
    cluster: float
    perceptual: float
    total: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


RECON_REDUCTIONS = ("mean", "sum")


def reconstruction_loss(x, x_hat, reduction: str = "mean"):
    """Squared error between ``x`` and ``x_hat``.

    ``"mean"`` averages over every pixel and channel. ``"sum"`` sums over each
    image and averages over the batch, which puts the term on the same scale as
    the summed KL (Gaussian log-likelihood up to constants).
    """
    _same_shape(x, x_hat, "reconstruction_loss")
    sq = (x_hat - x) ** 2
    if reduction == "mean":
        return torch.mean(sq)
    if reduction == "sum":
        return sq.reshape(sq.shape[0], -1).sum(dim=1).mean()
    raise LossError(f"unknown reduction {reduction!r}")


def kl_divergence(mu, logvar, prior_mean):
    """KL(N(mu, diag exp(logvar)) || N(prior_mean, I)), summed over latent dims, averaged over batch.

    ``prior_mean`` has the shape of ``mu`` (one prior mean per sample) or of a single sample.
    """
    _same_shape(mu, logvar, "kl_divergence")
    if prior_mean.shape != mu.shape:
        if prior_mean.shape != mu.shape[1:]:
            raise LossError(f"kl_divergence: prior shape {tuple(prior_mean.shape)} fits neither sample nor batch")
        prior_mean = prior_mean.expand_as(mu)
    for t in (mu, logvar, prior_mean):
        if not bool(torch.isfinite(t).all()):
            raise NonFiniteLoss("kl_divergence: non-finite input")
    per_dim = torch.exp(logvar) + (mu - prior_mean) ** 2 - 1.0 - logvar
    return 0.5 * per_dim.reshape(mu.shape[0], -1).sum(dim=1).mean()


def distance_loss(mu1, mu2, radius: float | None = None):
    """Negated L1 distance between two cluster means.

    With ``radius`` the distance is capped there, so the term stops pushing once
    the means are ``radius`` apart.
    """
    _same_shape(mu1, mu2, "distance_loss")
    d = torch.sum(torch.abs(mu1 - mu2))
    if radius is not None:
        d = torch.clamp(d, max=radius)
    return -d


def cluster_loss(z, assigned_means):
    """Mean over the batch of the squared distance from each latent to its cluster mean."""
    _same_shape(z, assigned_means, "cluster_loss")
    if z.shape[0] == 0:
        raise LossError("cluster_loss: empty batch")
    return ((assigned_means - z) ** 2).reshape(z.shape[0], -1).sum(dim=1).mean()


class PerceptualBackbone(nn.Module):
    """Small fixed CNN used as a feature extractor for the perceptual loss and FID.

    Weights are drawn once from ``seed`` and frozen. Inputs must be RGB.
    """

    def __init__(self, seed: int = 1234, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        self.seed = seed
        self.stages = nn.ModuleList()
        c_in = 3
        for w in widths:
            conv = nn.Conv2d(c_in, w, 3, stride=2, padding=1)
            bound = math.sqrt(6.0 / (c_in * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.zero_()
            self.stages.append(conv)
            c_in = w
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    @property
    def feature_dim(self) -> int:
        return self.stages[-1].out_channels

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise LossError(f"perceptual backbone takes 3-channel batches, got shape {tuple(x.shape)}")

    def features(self, x) -> list[torch.Tensor]:
        self._check(x)
        taps = []
        h = x.to(self.stages[0].weight.dtype)
        for conv in self.stages:
            h = F.relu(conv(h))
            taps.append(h)
        return taps

    def pooled(self, x) -> torch.Tensor:
        """Global-average-pooled final-tap features, shape (B, feature_dim)."""
        return self.features(x)[-1].mean(dim=(2, 3))


def perceptual_loss(backbone: PerceptualBackbone, x_rgb, x_hat_rgb):
    """Sum over tap layers of the feature MSE between ``x_rgb`` and ``x_hat_rgb``."""
    _same_shape(x_rgb, x_hat_rgb, "perceptual_loss")
    fx = backbone.features(x_rgb)
    fy = backbone.features(x_hat_rgb)
    return sum(torch.mean((a - b) ** 2) for a, b in zip(fx, fy))


def total_loss(recon, kl, distance, cluster, perceptual, weights: LossWeights):
    """Weighted sum of the components. Returns ``(total_tensor, LossBreakdown)``."""
    parts = {"recon": recon, "kl": kl, "distance": distance, "cluster": cluster, "perceptual": perceptual}
    values = {}
    for name, v in parts.items():
        v = torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteLoss(f"non-finite {name} loss")
        parts[name] = v
        values[name] = float(v.detach())
    total = (
        parts["recon"]
        + weights.beta * parts["kl"]
        + weights.w_distance * parts["distance"]
        + weights.w_cluster * parts["cluster"]
        + weights.w_perceptual * parts["perceptual"]
    )
    return total, LossBreakdown(total=float(total.detach()), **values)
