"""The five pipeline commands. Each writes under ``<output_dir>/<config hash>/``."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np

from clvae.checkpoint import load_checkpoint
from clvae.datamodel import (
    ANOMALY, SPLITS, DatasetManifest, ManifestEntry, load_manifest, load_samples, write_manifest, write_png,
)
from clvae.discrepancy import score_distribution_stats, write_discrepancy_png, write_stats_csv
from clvae.metrics import MetricsReport, roc_curve, tpr_fpr, write_roc_csv
from clvae.pipeline import figures
from clvae.pipeline.config import ExperimentConfig, config_hash_of_file
from clvae.pipeline.data import discrepancy_provider, load_config_samples, prepare_data, with_discrepancy
from clvae.pipeline.evaluation import ExperimentReport, evaluate
from clvae.pipeline.training import LOG_KEYS, TrainResult, train

log = logging.getLogger(__name__)

SWEEP_AXES = {
    "beta": "loss.beta",
    "latent_channels": "model.latent_channels",
    "discrepancy": "ablation.use_discrepancy",
}
ABLATION_SWITCHES = {
    "distance": "use_distance_loss",
    "cluster": "use_cluster_loss",
    "perceptual": "use_perceptual_loss",
}


class ReportError(RuntimeError):
    pass


def write_config(cfg: ExperimentConfig, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_bytes(cfg.canonical_json())
    return path


# --------------------------------------------------------------------------- generate


def cmd_generate(cfg: ExperimentConfig) -> Path:
    """Write the configured synthetic dataset as PNGs plus a split-tagged manifest; returns the manifest path."""
    run_dir = cfg.run_dir()
    write_config(cfg, run_dir)
    data_dir = run_dir / "data"
    for sub in ("images", "masks"):
        (data_dir / sub).mkdir(parents=True, exist_ok=True)
    splits = load_config_samples(cfg.override({"data.source": "synthetic", "data.manifest": None}))
    provider = discrepancy_provider(cfg) if cfg.ablation.use_discrepancy else None
    if provider is not None:
        (data_dir / "discrepancy").mkdir(exist_ok=True)
    entries = []
    for split in SPLITS:
        for s in splits[split]:
            img = f"images/{s.id}.png"
            write_png(data_dir / img, s.pixels)
            mask = None
            if s.label == ANOMALY:
                mask = f"masks/{s.id}.png"
                write_png(data_dir / mask, s.anomaly_mask.astype(np.float32))
            disc = None
            if provider is not None:
                disc = f"discrepancy/{s.id}.png"
                write_discrepancy_png(provider(s), data_dir / disc)
            entries.append(ManifestEntry(img, mask, s.label, s.dataset, split=split, discrepancy=disc))
    path = data_dir / "manifest.jsonl"
    write_manifest(DatasetManifest(entries), path)
    log.info("wrote %d samples to %s", len(entries), data_dir)
    return path


# --------------------------------------------------------------------------- train / eval


def cmd_train(cfg: ExperimentConfig, manifest=None, splits=None) -> tuple[Path, TrainResult]:
    run_dir = cfg.run_dir()
    write_config(cfg, run_dir)
    if splits is None:
        splits = prepare_data(cfg, manifest)
    result = train(cfg, splits, run_dir)
    return run_dir, result


def _read_epochs(run_dir: Path) -> list[dict]:
    path = run_dir / "epochs.jsonl"
    if not path.is_file():
        return []
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


def cmd_eval(checkpoint, manifest=None, out_dir=None, splits=None) -> ExperimentReport:
    """Evaluate a checkpoint on a test manifest, or on the test split its config describes."""
    checkpoint = Path(checkpoint)
    ck = load_checkpoint(checkpoint)
    if ck.config is None:
        raise ValueError(f"{checkpoint}: no experiment config stored in the checkpoint")
    cfg = ExperimentConfig.from_dict(ck.config)
    run_dir = checkpoint.parent
    if splits is None:
        if manifest is not None:
            m = load_manifest(manifest)
            samples = load_samples(m, cfg.model.image_size)
            tagged = [s for s in samples if s.split == "test"]
            test = tagged or [s.replace(split="test") for s in samples]
            splits = with_discrepancy({"train": [], "val": [], "test": test}, cfg)
        else:
            splits = prepare_data(cfg)
    stored = run_dir / "config.json"
    chash = config_hash_of_file(stored) if stored.is_file() else cfg.hash()
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "eval"
    report = evaluate(ck.model, splits, cfg, out_dir, cluster=ck.cluster, config_hash=chash,
                      epochs=_read_epochs(run_dir))
    report.wall_clock["train_seconds"] = (ck.extra or {}).get("train_seconds")
    report.write(out_dir / "report.json")
    return report


def train_and_eval(cfg: ExperimentConfig, splits=None, reuse: bool = False) -> tuple[Path, ExperimentReport]:
    run_dir = cfg.run_dir()
    if reuse and (run_dir / "eval" / "report.json").is_file() and (run_dir / "checkpoint.npz").is_file():
        log.info("reusing finished run %s", run_dir)
        return run_dir, ExperimentReport.read(run_dir / "eval" / "report.json")
    if splits is None:
        splits = prepare_data(cfg)
    run_dir, _ = cmd_train(cfg, splits=splits)
    return run_dir, cmd_eval(run_dir / "checkpoint.npz", splits=splits)


# --------------------------------------------------------------------------- invariants


def check_run_invariants(run_dir) -> list[str]:
    """Consistency checks over a finished run; returns human-readable violations."""
    run_dir = Path(run_dir)
    problems = []
    cfg_path = run_dir / "config.json"
    if not cfg_path.is_file():
        return [f"{run_dir}: missing config.json"]
    cfg = ExperimentConfig.from_dict(json.loads(cfg_path.read_text()))
    if config_hash_of_file(cfg_path) != run_dir.name:
        problems.append("config hash does not match run directory name")
    weights = cfg.loss_weights()
    disabled = [k for k, sw in ABLATION_SWITCHES.items() if not getattr(cfg.ablation, sw)]
    log_path = run_dir / "metrics.jsonl"
    if not log_path.is_file():
        problems.append("missing metrics.jsonl")
    else:
        for n, line in enumerate(log_path.read_text().splitlines(), start=1):
            rec = json.loads(line)
            if not all(math.isfinite(rec[k]) for k in LOG_KEYS):
                problems.append(f"step {rec['step']}: non-finite loss component")
            for k in disabled:
                if rec[k] != 0.0:
                    problems.append(f"step {rec['step']}: disabled {k} loss logged as {rec[k]}")
            expect = (rec["recon"] + weights.beta * rec["kl"] + weights.w_distance * rec["distance"]
                      + weights.w_cluster * rec["cluster"] + weights.w_perceptual * rec["perceptual"])
            if not math.isclose(expect, rec["total"], rel_tol=1e-5, abs_tol=1e-6):
                problems.append(f"step {rec['step']}: total {rec['total']} != weighted sum {expect}")
    ck_path = run_dir / "checkpoint.npz"
    if ck_path.is_file():
        ck = load_checkpoint(ck_path)
        want = 4 if cfg.ablation.use_discrepancy else 3
        if ck.model.spec.input_channels != want:
            problems.append(f"model has {ck.model.spec.input_channels} input channels, expected {want}")
        if not ck.model.all_finite():
            problems.append("checkpoint holds non-finite weights")
    else:
        problems.append("missing checkpoint.npz")
    metrics_path = run_dir / "eval" / "metrics.json"
    if metrics_path.is_file():
        m = json.loads(metrics_path.read_text())
        for k in ("auroc", "tpr", "fpr", "accuracy"):
            if m.get(k) is not None and not 0.0 <= m[k] <= 1.0:
                problems.append(f"{k}={m[k]} outside [0, 1]")
        if m.get("fid") is not None and m["fid"] < 0:
            problems.append(f"negative FID {m['fid']}")
    return problems


# --------------------------------------------------------------------------- sweep


SWEEP_COLUMNS = ["axis", "value", "config_hash", "fid", "mse", "auroc", "tpr", "fpr", "accuracy", "violations"]


def sweep_key(axis: str) -> str:
    return SWEEP_AXES.get(axis, axis)


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: list, reuse: bool = False) -> tuple[Path, list[dict]]:
    """One train+eval per value (shared data seed); writes an aggregated CSV and a figure."""
    if not values:
        raise ValueError("sweep needs at least one value")
    key = sweep_key(axis)
    cfg.get(key)
    configs = [cfg.override({key: v}) for v in values]
    splits_cache: dict[str, dict] = {}
    rows = []
    for v, c in zip(values, configs):
        # runs that differ only in model/loss settings share one dataset
        data_key = json.dumps([c.to_dict()["data"], c.to_dict()["discrepancy"], c.ablation.use_discrepancy,
                               c.seeds.data, c.model.image_size], sort_keys=True)
        splits = None
        if not (reuse and (c.run_dir() / "eval" / "report.json").is_file()):
            splits = splits_cache.get(data_key) or prepare_data(c)
            splits_cache[data_key] = splits
        run_dir, rep = train_and_eval(c, splits, reuse)
        violations = check_run_invariants(run_dir)
        rows.append({"axis": axis, "value": c.get(key), "config_hash": c.hash(), **rep.metrics,
                     "violations": len(violations), "violation_details": violations})
    tag = hashlib.sha256(json.dumps([cfg.hash(), key, [str(v) for v in values]]).encode()).hexdigest()[:12]
    out_dir = Path(cfg.output_dir) / "sweeps"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{axis.replace('.', '_')}-{tag}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    figures.sweep_figure(rows, axis, path.with_suffix(".png"))
    return path, rows


def run_discrepancy_ablation(cfg: ExperimentConfig, reuse: bool = False) -> tuple[Path, list[dict]]:
    """Paired 3-channel / 4-channel runs from one config, reported side by side."""
    return cmd_sweep(cfg, "discrepancy", [False, True], reuse)


# --------------------------------------------------------------------------- report


def _read_predictions(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(run_dir) -> Path:
    """Consolidate a run into ``<run_dir>/report/``: metrics JSON, ROC/scatter/box-plot CSVs, figures.

    Problems with individual inputs end up in the ``errors`` list of ``report.json``
    instead of aborting, as long as the run directory holds any logs at all.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"run directory not found: {run_dir}")
    has_logs = (run_dir / "metrics.jsonl").is_file() or (run_dir / "eval" / "predictions.csv").is_file()
    if not has_logs:
        raise ReportError(f"{run_dir}: no training log or evaluation output to report on")
    out = run_dir / "report"
    (out / "figures").mkdir(parents=True, exist_ok=True)
    errors: list[str] = []
    files: list[str] = []

    chash = None
    cfg_path = run_dir / "config.json"
    if cfg_path.is_file():
        chash = config_hash_of_file(cfg_path)
    else:
        errors.append("config.json missing")

    steps = []
    log_path = run_dir / "metrics.jsonl"
    if log_path.is_file():
        for n, line in enumerate(log_path.read_text().splitlines(), start=1):
            try:
                rec = json.loads(line)
                steps.append({"step": int(rec["step"]), **{k: float(rec[k]) for k in LOG_KEYS}})
            except (ValueError, KeyError, TypeError) as exc:
                errors.append(f"metrics.jsonl line {n}: {exc.__class__.__name__}: {exc}")
        if steps:
            figures.loss_figure(steps, out / "figures" / "loss_curves.png")
            files.append("figures/loss_curves.png")
    else:
        errors.append("metrics.jsonl missing")

    eval_dir = run_dir / "eval"
    eval_metrics = {}
    if (eval_dir / "metrics.json").is_file():
        try:
            eval_metrics = json.loads((eval_dir / "metrics.json").read_text())
            if chash is not None and eval_metrics.get("config_hash") != chash:
                errors.append(f"evaluation config hash {eval_metrics.get('config_hash')} != stored config {chash}")
        except json.JSONDecodeError as exc:
            errors.append(f"eval/metrics.json: {exc}")

    pred_path = eval_dir / "predictions.csv"
    if pred_path.is_file():
        try:
            preds = _read_predictions(pred_path)
            test = [r for r in preds if r["split"] == "test"]
            scores = [float(r["score"]) for r in test]
            truth = [r["true_label"] for r in test]
            curve = roc_curve(scores, truth)
            tpr, fpr = tpr_fpr([r["predicted_label"] for r in test], truth)
            write_roc_csv(curve, out / "roc.csv")
            figures.roc_figure(curve, out / "figures" / "roc.png")
            files += ["roc.csv", "figures/roc.png"]
            MetricsReport(fid=eval_metrics.get("fid"), mse=eval_metrics.get("mse"), auroc=curve.auc, tpr=tpr,
                          fpr=fpr, config_hash=chash or "", accuracy=eval_metrics.get("accuracy")
                          ).write(out / "metrics.json")
            files.append("metrics.json")

            with open(out / "scatter.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["sample_id", "pc1", "pc2", "true_label", "predicted_label", "dataset", "split"])
                for r in preds:
                    w.writerow([r["sample_id"], r["pc1"], r["pc2"], r["true_label"], r["predicted_label"],
                                r["dataset"], r["split"]])
            figures.scatter_figure(preds, out / "figures" / "latent_scatter.png")
            files += ["scatter.csv", "figures/latent_scatter.png"]

            groups: dict[str, list[float]] = {}
            for r in test:
                if r["mean_discrepancy"]:
                    groups.setdefault(f"{r['dataset']}/{r['true_label']}", []).append(float(r["mean_discrepancy"]))
            stats = {k: score_distribution_stats(v) for k, v in sorted(groups.items())}
            write_stats_csv(stats, out / "boxplot_stats.csv")
            files.append("boxplot_stats.csv")
            if groups:
                figures.boxplot_figure(dict(sorted(groups.items())), out / "figures" / "discrepancy_boxplot.png")
                files.append("figures/discrepancy_boxplot.png")
        except (ValueError, KeyError) as exc:
            errors.append(f"eval/predictions.csv: {exc.__class__.__name__}: {exc}")
    else:
        errors.append("evaluation outputs missing (run `eval` first)")

    summary = {
        "config_hash": chash,
        "run_dir": str(run_dir),
        "files": files,
        "errors": errors,
        "n_steps": len(steps),
        "final_epoch": (_read_epochs(run_dir) or [None])[-1],
        "metrics": eval_metrics or None,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out
