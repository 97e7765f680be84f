"""Training loop: Adam with linear learning-rate decay, per-step loss logging, checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from clvae.checkpoint import save_checkpoint
from clvae.clustering import ClusterModel, kmeans_fit, map_clusters_to_labels
from clvae.datamodel import ImageSample
from clvae.losses import (
    NonFiniteLoss, PerceptualBackbone, cluster_loss, distance_loss, kl_divergence,
    perceptual_loss, reconstruction_loss, total_loss,
)
from clvae.pipeline.config import ExperimentConfig
from clvae.pipeline.data import label_vector, to_tensor
from clvae.vae import ConditionedVAE, PriorSet

log = logging.getLogger(__name__)

LOG_KEYS = ("recon", "kl", "distance", "cluster", "perceptual", "total")


class NumericalAbort(RuntimeError):
    """Raised when a loss or a weight becomes non-finite."""


@dataclass
class TrainResult:
    model: ConditionedVAE
    priors: PriorSet
    backbone: PerceptualBackbone
    cluster: ClusterModel
    epochs: list[dict] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def lr_factor(step: int, total_steps: int, linear_decay: bool = True) -> float:
    """Multiplier for the learning rate used at 0-based ``step``; falls linearly to 0 after the last step."""
    if not linear_decay:
        return 1.0
    return max(0.0, 1.0 - step / total_steps)


def make_batches(labels: np.ndarray, batch_size: int, epoch: int, seed: int,
                 anomaly_fraction: float | None = None) -> list[np.ndarray]:
    """Index batches for one epoch.

    Without ``anomaly_fraction`` this is a seeded shuffle cut into consecutive
    batches (the last may be short). With it, each batch holds
    ``round(anomaly_fraction * batch_size)`` anomalies drawn with replacement and is
    filled up from a shuffle of the normal samples, until every normal sample has
    been used once.
    """
    rng = np.random.default_rng([seed, epoch])
    n = len(labels)
    if anomaly_fraction is None:
        order = rng.permutation(n)
        return [order[i:i + batch_size] for i in range(0, n, batch_size)]
    anom = np.flatnonzero(labels == 1)
    norm = rng.permutation(np.flatnonzero(labels == 0))
    k = int(round(anomaly_fraction * batch_size)) if len(anom) else 0
    k = min(k, batch_size - 1)
    per = batch_size - k
    batches = []
    for i in range(0, len(norm), per):
        idx = np.concatenate([norm[i:i + per], rng.choice(anom, size=k, replace=True)]) if k else norm[i:i + per]
        batches.append(idx)
    return batches


@torch.no_grad()
def encode_mu(model: ConditionedVAE, x: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    """Flattened posterior means in eval mode, shape (N, latent_dim), float64."""
    was_training = model.training
    model.eval()
    out = [model.encode(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return torch.cat(out).reshape(len(x), -1).double().numpy()


def class_means(mu_flat: torch.Tensor, labels: torch.Tensor):
    """Per-class batch means of the flattened posterior means, or None if a class is missing."""
    normal = labels == 0
    if normal.all() or not normal.any():
        return None
    return mu_flat[normal].mean(dim=0), mu_flat[~normal].mean(dim=0)


def batch_losses(model, backbone, x, labels, prior_means, cfg: ExperimentConfig,
                 assigned_means=None, noise=None):
    """Forward one batch and return ``(total_tensor, LossBreakdown)``.

    ``labels`` is a 0/1 tensor, ``prior_means`` the label-matched prior mean per
    sample, ``assigned_means`` the k-means centroid per sample (cluster loss only).
    """
    ab = cfg.ablation
    x_hat, mu, logvar, _ = model(x, noise)
    zero = x.new_zeros(())
    recon = reconstruction_loss(x, x_hat, cfg.loss.recon_reduction)
    kl = kl_divergence(mu, logvar, prior_means)
    mu_flat = mu.reshape(len(mu), -1)
    distance = zero
    if ab.use_distance_loss:
        means = class_means(mu_flat, labels)
        if means is not None:
            distance = distance_loss(*means, radius=cfg.loss.distance_radius)
    cluster = zero
    if ab.use_cluster_loss and assigned_means is not None:
        cluster = cluster_loss(mu_flat, assigned_means)
    perceptual = zero
    if ab.use_perceptual_loss:
        perceptual = perceptual_loss(backbone, x[:, :3], x_hat[:, :3])
    return total_loss(recon, kl, distance, cluster, perceptual, cfg.loss_weights())


def _fit_clusters(model, x, labels, cfg: ExperimentConfig) -> tuple[ClusterModel, np.ndarray]:
    mu = encode_mu(model, x)
    cm = kmeans_fit(mu, k=cfg.eval.kmeans_k, seed=cfg.eval.kmeans_seed)
    cm = map_clusters_to_labels(cm, mu, labels.tolist())
    return cm, mu


def train(cfg: ExperimentConfig, splits: dict[str, list[ImageSample]], run_dir=None) -> TrainResult:
    """Train on ``splits['train']``; logs and checkpoints go to ``run_dir`` when given."""
    t0 = time.perf_counter()
    train_samples = splits["train"]
    if not train_samples:
        raise ValueError("empty training split")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seeds.model)
    spec = cfg.vae_spec()
    model = ConditionedVAE(spec)
    backbone = PerceptualBackbone(seed=cfg.seeds.backbone)
    priors = PriorSet.symmetric(spec.latent_channels, cfg.model.prior_delta)
    tc = cfg.train
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=tuple(tc.adam_betas), eps=tc.adam_eps)

    x_all = to_tensor(train_samples)
    y_all = label_vector(train_samples)
    y_t = torch.from_numpy(y_all)
    prior_all = priors.stacked(y_all.tolist())

    batches_per_epoch = len(make_batches(y_all, tc.batch_size, 0, cfg.seeds.data, tc.anomaly_fraction))
    total_steps = tc.epochs * batches_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, total_steps, tc.linear_decay))

    metrics_fh = open(run_dir / "metrics.jsonl", "w") if run_dir is not None else None
    epochs: list[dict] = []
    step = 0
    try:
        for epoch in range(1, tc.epochs + 1):
            assignments = None
            if cfg.ablation.use_cluster_loss:
                # centroids from the current latents, frozen for the epoch
                mu_all = encode_mu(model, x_all)
                cm = kmeans_fit(mu_all, k=cfg.eval.kmeans_k, seed=cfg.eval.kmeans_seed)
                centroids = torch.as_tensor(cm.centroids, dtype=torch.float32)
                assignments = centroids[torch.from_numpy(cm.assign(mu_all))]
            model.train()
            sums = dict.fromkeys(LOG_KEYS, 0.0)
            batches = make_batches(y_all, tc.batch_size, epoch, cfg.seeds.data, tc.anomaly_fraction)
            for idx in batches:
                idx_t = torch.from_numpy(np.asarray(idx))
                x = x_all[idx_t]
                assigned = assignments[idx_t] if assignments is not None else None
                lr_now = opt.param_groups[0]["lr"]
                try:
                    total, parts = batch_losses(model, backbone, x, y_t[idx_t], prior_all[idx_t], cfg, assigned)
                except NonFiniteLoss as exc:
                    raise NumericalAbort(f"step {step + 1}: {exc}") from None
                if not math.isfinite(parts.total):
                    raise NumericalAbort(f"non-finite loss at step {step + 1}")
                snapshot = copy.deepcopy(model.state_dict())
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                sched.step()
                if not model.all_finite():
                    model.load_state_dict(snapshot)
                    raise NumericalAbort(f"non-finite weights after step {step + 1}")
                step += 1
                model.step = step
                for k in LOG_KEYS:
                    sums[k] += getattr(parts, k)
                if metrics_fh is not None:
                    rec = {"step": step, "epoch": epoch, "lr": lr_now, **parts.to_dict()}
                    metrics_fh.write(json.dumps(rec) + "\n")
            summary = {"epoch": epoch, "steps": len(batches), **{k: v / len(batches) for k, v in sums.items()}}
            epochs.append(summary)
            log.info("epoch %d/%d total=%.5f recon=%.5f kl=%.3f", epoch, tc.epochs,
                     summary["total"], summary["recon"], summary["kl"])
            if run_dir is not None and tc.checkpoint_every and epoch % tc.checkpoint_every == 0 and epoch < tc.epochs:
                save_checkpoint(run_dir / f"checkpoint_epoch{epoch:04d}.npz", model, priors, cfg.to_dict())
    except NumericalAbort:
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoint_last_good.npz", model, priors, cfg.to_dict(),
                            extra={"aborted": True})
        raise
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    model.eval()
    cluster, _ = _fit_clusters(model, x_all, y_all, cfg)
    seconds = time.perf_counter() - t0
    if run_dir is not None:
        with open(run_dir / "epochs.jsonl", "w") as fh:
            for e in epochs:
                fh.write(json.dumps(e) + "\n")
        save_checkpoint(run_dir / "checkpoint.npz", model, priors, cfg.to_dict(), cluster,
                        extra={"train_seconds": seconds})
    return TrainResult(model, priors, backbone, cluster, epochs, step, seconds)
