"""Turning a config into split, channel-complete sample lists and tensors."""
from __future__ import annotations

import logging
from collections import defaultdict

import numpy as np
import torch

from clvae.datamodel import (
    ANOMALY, SPLITS, ImageSample, filter_by_anomaly_pixels, generate_synthetic_dataset,
    load_manifest, load_samples, split_dataset,
)
from clvae.discrepancy import attach_fourth_channel, make_provider
from clvae.pipeline.config import ExperimentConfig

log = logging.getLogger(__name__)


def stratified_split(samples: list[ImageSample], cfg: ExperimentConfig) -> dict[str, list[ImageSample]]:
    """Split each (dataset, label) group separately so every split keeps both labels."""
    groups: dict[tuple, list] = defaultdict(list)
    for s in samples:
        groups[(s.dataset, s.label)].append(s)
    out = {k: [] for k in SPLITS}
    spec = cfg.split_spec()
    for key in sorted(groups):
        for split, part in split_dataset(groups[key], spec).items():
            out[split] += [s.replace(split=split) for s in part]
    return out


def cap_per_scene(samples: list[ImageSample], cap: int | None) -> list[ImageSample]:
    if cap is None:
        return samples
    seen: dict[str, int] = defaultdict(int)
    out = []
    for s in samples:
        scene = s.meta.get("scene")
        if scene is not None:
            seen[scene] += 1
            if seen[scene] > cap:
                continue
        out.append(s)
    return out


def load_config_samples(cfg: ExperimentConfig, manifest_path=None) -> dict[str, list[ImageSample]]:
    """Samples per split, RGB only. Manifest split tags win over the configured split rule."""
    d = cfg.data
    path = manifest_path or (d.manifest if d.source == "manifest" else None)
    if path is None:
        n_normal, n_anomaly = d.counts()
        samples = generate_synthetic_dataset(cfg.scene_spec(), n_normal, n_anomaly)
        return stratified_split(samples, cfg)
    manifest = load_manifest(path)
    samples = load_samples(manifest, cfg.model.image_size)
    samples = filter_by_anomaly_pixels(samples, d.min_anomaly_pixels)
    samples = cap_per_scene(samples, d.max_per_scene)
    if all(s.split is not None for s in samples):
        out = {k: [] for k in SPLITS}
        for s in samples:
            out[s.split].append(s)
        return out
    tagged = [s for s in samples if s.split is not None]
    if tagged:
        log.warning("manifest has split tags on only %d of %d entries; re-splitting all", len(tagged), len(samples))
    return stratified_split(samples, cfg)


def with_discrepancy(splits: dict[str, list[ImageSample]], cfg: ExperimentConfig) -> dict[str, list[ImageSample]]:
    if not cfg.ablation.use_discrepancy:
        return splits
    provider = discrepancy_provider(cfg)
    return {k: [attach_fourth_channel(s, provider(s)) for s in v] for k, v in splits.items()}


def discrepancy_provider(cfg: ExperimentConfig):
    dc = cfg.discrepancy
    return make_provider(dc.provider, dc.noise_level, cfg.seeds.data, dc.directory)


def prepare_data(cfg: ExperimentConfig, manifest_path=None) -> dict[str, list[ImageSample]]:
    return with_discrepancy(load_config_samples(cfg, manifest_path), cfg)


def to_tensor(samples: list[ImageSample]) -> torch.Tensor:
    if not samples:
        raise ValueError("no samples")
    x = np.stack([s.pixels for s in samples]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def label_vector(samples: list[ImageSample]) -> np.ndarray:
    return np.array([1 if s.label == ANOMALY else 0 for s in samples], dtype=np.int64)
