"""Evaluation of a trained model: cluster classification, ROC, FID/MSE, PCA scatter."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from clvae.clustering import (
    ClusterModel, anomaly_scores, classify_batch, kmeans_fit, map_clusters_to_labels,
    pca_fit_project, write_scatter_csv,
)
from clvae.datamodel import ANOMALY, SPLITS, ImageSample
from clvae.discrepancy import mean_anomaly_score, score_distribution_stats, write_stats_csv, DiscrepancyImage
from clvae.losses import PerceptualBackbone
from clvae.metrics import MetricsReport, accuracy, fid, mse, roc_curve, tpr_fpr, write_roc_csv
from clvae.pipeline.config import ExperimentConfig
from clvae.pipeline.data import discrepancy_provider, to_tensor
from clvae.pipeline.training import encode_mu
from clvae.vae import ConditionedVAE

PREDICTION_HEADER = ["sample_id", "split", "dataset", "true_label", "predicted_label", "score",
                     "pc1", "pc2", "mean_discrepancy"]


@dataclass
class ExperimentReport:
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    scatter_path: str | None = None
    predictions_path: str | None = None
    roc_path: str | None = None
    wall_clock: dict = field(default_factory=dict)
    cluster: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "ExperimentReport":
        return cls(**json.loads(Path(path).read_text()))


@torch.no_grad()
def reconstruct(model: ConditionedVAE, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    """Decode the posterior means (eval mode)."""
    model.eval()
    return torch.cat([model.decode(model.encode(x[i:i + batch_size])[0]) for i in range(0, len(x), batch_size)])


def _mean_discrepancy(samples: list[ImageSample], cfg: ExperimentConfig) -> list[float | None]:
    if cfg.ablation.use_discrepancy:
        return [mean_anomaly_score(DiscrepancyImage(s.pixels[..., 3])) for s in samples]
    provider = discrepancy_provider(cfg)
    out = []
    for s in samples:
        try:
            out.append(mean_anomaly_score(provider(s)))
        except (ValueError, OSError):
            out.append(None)
    return out


def evaluate(model: ConditionedVAE, splits: dict[str, list[ImageSample]], cfg: ExperimentConfig,
             out_dir=None, cluster: ClusterModel | None = None, config_hash: str | None = None,
             epochs: list[dict] | None = None) -> ExperimentReport:
    """Classify the test split with k-means over posterior means.

    ``cluster`` defaults to a fresh fit on the train split. Scores for the ROC are
    distances to the normal centroid. FID and MSE compare test images with the
    reconstructions decoded from their posterior means.
    """
    t0 = time.perf_counter()
    model.eval()
    test = splits.get("test") or []
    if not test:
        raise ValueError("evaluation needs a nonempty test split")
    labels_test = [s.label for s in test]
    if len(set(labels_test)) < 2:
        raise ValueError("test split must contain both normal and anomaly samples")

    mus = {k: encode_mu(model, to_tensor(v)) for k, v in splits.items() if v}
    if cluster is None:
        if "train" not in mus:
            raise ValueError("no train split to fit the cluster model on")
        cluster = kmeans_fit(mus["train"], k=cfg.eval.kmeans_k, seed=cfg.eval.kmeans_seed)
        cluster = map_clusters_to_labels(cluster, mus["train"], [s.label for s in splits["train"]])

    pred_test = classify_batch(cluster, mus["test"])
    scores_test = anomaly_scores(cluster, mus["test"])
    tpr, fpr = tpr_fpr(pred_test, labels_test)
    curve = roc_curve(scores_test, labels_test)

    x_test = to_tensor(test)
    x_hat = reconstruct(model, x_test)
    backbone = PerceptualBackbone(seed=cfg.seeds.backbone)
    metrics = {
        "fid": fid(x_test[:, :3], x_hat[:, :3], backbone),
        "mse": mse(x_test.numpy(), x_hat.numpy()),
        "auroc": curve.auc,
        "tpr": tpr,
        "fpr": fpr,
        "accuracy": accuracy(pred_test, labels_test),
    }

    report = ExperimentReport(
        config_hash=config_hash or cfg.hash(), epochs=list(epochs or []), metrics=metrics,
        cluster=cluster.to_meta(),
        counts={k: {"n": len(v), "anomaly": sum(s.label == ANOMALY for s in v)} for k, v in splits.items()},
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _export(out_dir, model, splits, mus, cluster, cfg, curve, report)
    report.wall_clock["eval_seconds"] = time.perf_counter() - t0
    if out_dir is not None:
        report.write(out_dir / "report.json")
    return report


def _export(out_dir: Path, model, splits, mus, cluster, cfg, curve, report: ExperimentReport) -> None:
    train_key = "train" if "train" in mus else "test"
    pca, _ = pca_fit_project(mus[train_key])
    rows = []
    ids, coords, true, pred, dsets = [], [], [], [], []
    stats_groups: dict[str, list[float]] = {}
    for split in SPLITS:
        samples = splits.get(split) or []
        if not samples:
            continue
        xy = pca.project(mus[split])
        p = classify_batch(cluster, mus[split])
        sc = anomaly_scores(cluster, mus[split])
        disc = _mean_discrepancy(samples, cfg)
        for s, c, lab, score, d in zip(samples, xy, p, sc, disc):
            rows.append([s.id, split, s.dataset, s.label, lab, repr(float(score)), repr(float(c[0])),
                         repr(float(c[1])), "" if d is None else repr(d)])
            ids.append(s.id)
            coords.append(c)
            true.append(s.label)
            pred.append(lab)
            dsets.append(s.dataset)
            if d is not None and split == "test":
                stats_groups.setdefault(f"{s.dataset}/{s.label}", []).append(d)
    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_HEADER)
        w.writerows(rows)
    write_scatter_csv(out_dir / "scatter.csv", ids, np.array(coords), true, pred, dsets)
    write_roc_csv(curve, out_dir / "roc.csv")
    if stats_groups:
        write_stats_csv({k: score_distribution_stats(v) for k, v in sorted(stats_groups.items())},
                        out_dir / "boxplot_stats.csv")
    m = report.metrics
    MetricsReport(fid=m["fid"], mse=m["mse"], auroc=m["auroc"], tpr=m["tpr"], fpr=m["fpr"],
                  config_hash=report.config_hash, accuracy=m["accuracy"]).write(out_dir / "metrics.json")
    report.scatter_path = str(out_dir / "scatter.csv")
    report.predictions_path = str(out_dir / "predictions.csv")
    report.roc_path = str(out_dir / "roc.csv")
