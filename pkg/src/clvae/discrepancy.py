"""Synthetic-anomaly label replacement and discrepancy images.

Two replacement modes produce training maps for a discrepancy detector:

* ``random``: the replacement class is uniform over the vocabulary (minus the
  instance's own class). Rare normal classes then show up as replacements far
  more often than they occur as normal content.
* ``frequency``: the replacement class is drawn proportional to its frequency in
  normal data, so a class is "anomalous" about as often as it is normal.

Discrepancy images themselves come from a provider. The default provider builds
them from ground-truth masks; :class:`FileDiscrepancy` reads precomputed PNGs.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from clvae.datamodel import (
    ClassFrequencyTable, DataError, ImageSample, downsample_image, read_png, write_png,
)

DEFAULT_MIN_INSTANCE_AREA = 16


@dataclass(frozen=True)
class LabelMap:
    classes: np.ndarray
    vocabulary: frozenset = None

    def __post_init__(self):
        c = np.asarray(self.classes)
        if c.ndim != 2 or c.dtype.kind not in "iu":
            raise ValueError("label map must be a 2-D integer array")
        object.__setattr__(self, "classes", c)
        vocab = frozenset(np.unique(c).tolist()) if self.vocabulary is None else frozenset(self.vocabulary)
        present = set(np.unique(c).tolist())
        if not present <= vocab:
            raise ValueError(f"classes {sorted(present - vocab)} are outside the vocabulary")
        object.__setattr__(self, "vocabulary", vocab)


@dataclass(frozen=True)
class Replacement:
    instance_id: int
    original: int
    replacement: int


@dataclass
class ReplacementPlan:
    entries: list[Replacement] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        for e in self.entries:
            if e.original == e.replacement:
                raise ValueError(f"instance {e.instance_id} replaced by its own class")


def find_instances(label_map: LabelMap, min_area: int = DEFAULT_MIN_INSTANCE_AREA):
    """4-connected components per class with at least ``min_area`` pixels.

    Returns ``(instance_ids, original_classes, masks)`` in a fixed order: ascending class id,
    then scipy's raster-order component numbering.
    """
    classes, masks = [], []
    for c in sorted(np.unique(label_map.classes).tolist()):
        lab, n = ndimage.label(label_map.classes == c)
        if n == 0:
            continue
        areas = np.bincount(lab.ravel(), minlength=n + 1)
        for k in range(1, n + 1):
            if areas[k] >= min_area:
                classes.append(c)
                masks.append(lab == k)
    return list(range(len(classes))), classes, masks


def replacement_weights(original: int, candidates: dict[int, float]) -> tuple[list[int], np.ndarray]:
    """Candidate classes other than ``original`` with their renormalized weights."""
    cls = [c for c in sorted(candidates) if c != original]
    w = np.array([candidates[c] for c in cls], dtype=float)
    if not cls or w.sum() <= 0:
        raise ValueError(f"no replacement class available for class {original}")
    return cls, w / w.sum()


def _replace(label_map: LabelMap, n_objects: int, seed: int, candidates, min_area: int):
    if n_objects < 0:
        raise ValueError("n_objects must be nonnegative")
    ids, originals, masks = find_instances(label_map, min_area)
    if n_objects > len(ids):
        raise ValueError(f"requested {n_objects} replacements but the map has {len(ids)} instances")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(ids), size=n_objects, replace=False).tolist()) if n_objects else []
    out = label_map.classes.copy()
    entries = []
    for i in chosen:
        cls, p = replacement_weights(originals[i], candidates)
        new = cls[int(rng.choice(len(cls), p=p))]
        out[masks[i]] = new
        entries.append(Replacement(ids[i], originals[i], new))
    vocab = label_map.vocabulary | set(candidates)
    return LabelMap(out, vocab), ReplacementPlan(entries, seed)


def frequency_based_label_replacement(
    label_map: LabelMap,
    freqs: ClassFrequencyTable,
    n_objects: int,
    seed: int,
    basis: str = "pixel",
    min_area: int = DEFAULT_MIN_INSTANCE_AREA,
):
    """Replace ``n_objects`` random instances; new classes drawn proportional to normal-data frequency."""
    weights = freqs.frequencies(basis)
    missing = label_map.vocabulary - set(weights)
    if missing:
        raise ValueError(f"frequency table lacks classes {sorted(missing)}")
    return _replace(label_map, n_objects, seed, weights, min_area)


def random_label_replacement(label_map: LabelMap, n_objects: int, seed: int,
                             min_area: int = DEFAULT_MIN_INSTANCE_AREA):
    """Replace ``n_objects`` random instances with a class drawn uniformly from the rest of the vocabulary."""
    return _replace(label_map, n_objects, seed, {c: 1.0 for c in label_map.vocabulary}, min_area)


def label_replacement(label_map, n_objects, seed, mode="frequency", freqs=None, **kw):
    if mode == "frequency":
        if freqs is None:
            raise ValueError("frequency mode needs a ClassFrequencyTable")
        return frequency_based_label_replacement(label_map, freqs, n_objects, seed, **kw)
    if mode in ("random", "uniform"):
        kw.pop("basis", None)
        return random_label_replacement(label_map, n_objects, seed, **kw)
    raise ValueError(f"unknown replacement mode {mode!r}")


# --------------------------------------------------------------------------- discrepancy images


@dataclass(frozen=True)
class DiscrepancyImage:
    """Per-pixel anomaly scores; 0 is normal, 1 anomalous."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float32)
        if s.ndim != 2:
            raise ValueError("discrepancy scores must be a 2-D array")
        if not np.all(np.isfinite(s)) or s.min(initial=0.0) < 0.0 or s.max(initial=0.0) > 1.0:
            raise ValueError("discrepancy scores must lie in [0, 1]")
        object.__setattr__(self, "scores", s)


def _sample_stream(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode("utf-8"))])


def oracle_discrepancy(sample: ImageSample, noise_level: float, seed: int) -> DiscrepancyImage:
    """Discrepancy image built from the ground-truth mask.

    The mask is smoothed with a 3x3 box filter (so scores are positive exactly on
    the mask dilated by one pixel), then Gaussian noise of std ``noise_level`` is
    added and the result clipped to [0, 1].
    """
    if noise_level < 0:
        raise ValueError("noise_level must be nonnegative")
    h, w = sample.size
    if sample.is_anomaly:
        if sample.anomaly_mask is None:
            raise DataError(f"anomaly sample {sample.id!r} has no mask")
        base = ndimage.uniform_filter(sample.anomaly_mask.astype(np.float64), size=3, mode="constant")
        base[base < 1e-12] = 0.0
    else:
        base = np.zeros((h, w))
    if noise_level > 0:
        base = base + _sample_stream(seed, sample.id).normal(0.0, noise_level, (h, w))
    return DiscrepancyImage(np.clip(base, 0.0, 1.0))


def read_discrepancy_png(path) -> DiscrepancyImage:
    """8-bit grayscale, 0 normal .. 255 anomalous."""
    return DiscrepancyImage(read_png(path, "L"))


def write_discrepancy_png(d: DiscrepancyImage, path) -> None:
    write_png(path, d.scores)


class DiscrepancyProvider(Protocol):
    def __call__(self, sample: ImageSample) -> DiscrepancyImage: ...


@dataclass(frozen=True)
class OracleDiscrepancy:
    noise_level: float = 0.05
    seed: int = 0

    def __call__(self, sample: ImageSample) -> DiscrepancyImage:
        return oracle_discrepancy(sample, self.noise_level, self.seed)


@dataclass(frozen=True)
class FileDiscrepancy:
    """Reads ``<directory>/<sample id>.png``, or the path recorded from a manifest entry."""

    directory: str | None = None

    def __call__(self, sample: ImageSample) -> DiscrepancyImage:
        path = sample.meta.get("discrepancy_path")
        if path is None:
            if self.directory is None:
                raise DataError(f"no discrepancy image recorded for sample {sample.id!r}")
            path = Path(self.directory) / f"{sample.id}.png"
        d = read_discrepancy_png(path)
        if d.scores.shape != sample.size:
            d = DiscrepancyImage(downsample_image(d.scores, sample.size))
        return d


def make_provider(kind: str, noise_level: float = 0.05, seed: int = 0, directory: str | None = None):
    if kind == "oracle":
        return OracleDiscrepancy(noise_level, seed)
    if kind == "file":
        return FileDiscrepancy(directory)
    raise ValueError(f"unknown discrepancy provider {kind!r}")


def mean_anomaly_score(d: DiscrepancyImage) -> float:
    return float(np.mean(d.scores, dtype=np.float64))


@dataclass(frozen=True)
class ScoreStats:
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float

    def row(self) -> list:
        return [self.n, self.min, self.q1, self.median, self.q3, self.max, self.mean]


def score_distribution_stats(scores: Sequence[float]) -> ScoreStats:
    """Five-number summary (linear-interpolated quartiles) plus the mean."""
    a = np.asarray(scores, dtype=np.float64)
    if a.size == 0:
        raise ValueError("cannot summarize an empty score list")
    q = np.quantile(a, [0.0, 0.25, 0.5, 0.75, 1.0])
    return ScoreStats(int(a.size), *(float(v) for v in q), float(a.mean()))


STATS_HEADER = ["dataset", "n", "min", "q1", "median", "q3", "max", "mean"]


def write_stats_csv(stats: dict[str, ScoreStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_HEADER)
        for name, st in stats.items():
            w.writerow([name, *st.row()])


def attach_fourth_channel(sample: ImageSample, d: DiscrepancyImage) -> ImageSample:
    if sample.channels != 3:
        raise DataError(f"{sample.id}: already has {sample.channels} channels")
    if d.scores.shape != sample.size:
        raise DataError(f"{sample.id}: discrepancy {d.scores.shape} does not match image {sample.size}")
    px = np.concatenate([sample.pixels, d.scores[..., None].astype(sample.pixels.dtype)], axis=2)
    return sample.replace(pixels=px)


def strip_fourth_channel(sample: ImageSample) -> ImageSample:
    if sample.channels != 4:
        raise DataError(f"{sample.id}: has no fourth channel")
    return sample.replace(pixels=np.ascontiguousarray(sample.pixels[..., :3]))
