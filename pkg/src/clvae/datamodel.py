"""Samples, manifests, splitting/filtering rules and the synthetic scene generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

NORMAL = "normal"
ANOMALY = "anomaly"
LABELS = (NORMAL, ANOMALY)
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1

_LABEL_ALIASES = {
    "normal": NORMAL, "0": NORMAL, "ok": NORMAL, "inlier": NORMAL,
    "anomaly": ANOMALY, "1": ANOMALY, "anomalous": ANOMALY, "outlier": ANOMALY,
}


class DataError(ValueError):
    """Invalid dataset content (bad manifest, missing files, broken invariants)."""


def normalize_label(label) -> str:
    key = str(label).strip().lower()
    if key not in _LABEL_ALIASES:
        raise DataError(f"unknown label {label!r}; expected one of {LABELS}")
    return _LABEL_ALIASES[key]


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray
    label: str
    anomaly_mask: np.ndarray | None = None
    split: str | None = None
    dataset: str = "synthetic"
    class_map: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.label = normalize_label(self.label)
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] not in (3, 4):
            raise DataError(f"{self.id}: pixels must be HxWx3 or HxWx4, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise DataError(f"{self.id}: pixel values outside [0, 1]")
        self.pixels = px
        if self.anomaly_mask is not None:
            mask = np.asarray(self.anomaly_mask).astype(bool)
            if mask.shape != px.shape[:2]:
                raise DataError(f"{self.id}: mask shape {mask.shape} != image {px.shape[:2]}")
            if self.label == ANOMALY and not mask.any():
                raise DataError(f"{self.id}: anomaly sample with an empty mask")
            self.anomaly_mask = mask
        if self.split is not None and self.split not in SPLITS:
            raise DataError(f"{self.id}: unknown split {self.split!r}")

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    @property
    def is_anomaly(self) -> bool:
        return self.label == ANOMALY

    def replace(self, **changes) -> "ImageSample":
        fields = dict(
            id=self.id, pixels=self.pixels, label=self.label, anomaly_mask=self.anomaly_mask,
            split=self.split, dataset=self.dataset, class_map=self.class_map, meta=dict(self.meta),
        )
        fields.update(changes)
        return ImageSample(**fields)


# --------------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    mask: str | None
    label: str
    dataset: str
    split: str | None = None
    discrepancy: str | None = None
    scene: str | None = None

    def to_json(self) -> dict:
        d = {"image": self.image, "mask": self.mask, "label": self.label, "dataset": self.dataset}
        for opt in ("split", "discrepancy", "scene"):
            if getattr(self, opt) is not None:
                d[opt] = getattr(self, opt)
        return d


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def split_counts(self) -> dict[str | None, int]:
        counts: dict[str | None, int] = {}
        for e in self.entries:
            counts[e.split] = counts.get(e.split, 0) + 1
        return counts


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse a JSON-lines manifest. Relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    manifest = DatasetManifest(root=path.parent)
    header_seen = False
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: expected a JSON object")
        if not header_seen:
            if "manifest_version" not in obj:
                raise DataError(f"{path}:{lineno}: missing header line with manifest_version")
            if obj["manifest_version"] != MANIFEST_VERSION:
                raise DataError(f"{path}:{lineno}: unsupported manifest_version {obj['manifest_version']!r}")
            manifest.version = obj["manifest_version"]
            header_seen = True
            continue
        try:
            image = obj["image"]
            label = normalize_label(obj["label"])
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        split = obj.get("split")
        if split is not None and split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        if not isinstance(image, str) or not image:
            raise DataError(f"{path}:{lineno}: 'image' must be a nonempty string")
        if image in seen:
            raise DataError(f"{path}:{lineno}: duplicate image path {image!r} (first on line {seen[image]})")
        seen[image] = lineno
        manifest.entries.append(ManifestEntry(
            image=image, mask=obj.get("mask"), label=label, dataset=str(obj.get("dataset", "default")),
            split=split, discrepancy=obj.get("discrepancy"),
            scene=None if obj.get("scene") is None else str(obj["scene"]),
        ))
    if not header_seen:
        raise DataError(f"{path}: empty file, expected a manifest_version header")
    if check_files:
        missing = []
        for e in manifest.entries:
            for rel in (e.image, e.mask, e.discrepancy):
                p = manifest.resolve(rel)
                if p is not None and not p.is_file():
                    missing.append(str(p))
        if missing:
            raise DataError("manifest references missing files:\n  " + "\n  ".join(missing))
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [json.dumps({"manifest_version": manifest.version})]
    lines += [json.dumps(e.to_json(), sort_keys=True) for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_png(path, mode: str = "RGB") -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    return arr


def write_png(path, arr: np.ndarray) -> None:
    a = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    Image.fromarray(a).save(path, optimize=False)


def load_samples(manifest: DatasetManifest, image_size: int | None = None) -> list[ImageSample]:
    """Read the images and masks of a manifest, optionally downsampling to ``image_size``."""
    out = []
    for e in manifest.entries:
        px = read_png(manifest.resolve(e.image), "RGB")
        mask = None
        if e.mask is not None:
            mask = read_png(manifest.resolve(e.mask), "L") > 0
        meta = {"source": e.image, "native_mask_pixels": int(mask.sum()) if mask is not None else 0}
        if e.discrepancy is not None:
            meta["discrepancy_path"] = str(manifest.resolve(e.discrepancy))
        if e.scene is not None:
            meta["scene"] = e.scene
        if image_size is not None and px.shape[:2] != (image_size, image_size):
            px = downsample_image(px, (image_size, image_size))
            if mask is not None:
                mask = downsample_image(mask.astype(np.float32), (image_size, image_size)) >= 0.5
        sid = Path(e.image).with_suffix("").as_posix().replace("/", "__")
        if e.label == ANOMALY and mask is not None and not mask.any():
            # anomaly vanished at this resolution; keep the native count for filtering
            mask = None
        out.append(ImageSample(id=sid, pixels=np.clip(px, 0.0, 1.0), label=e.label, anomaly_mask=mask,
                               split=e.split, dataset=e.dataset, meta=meta))
    return out


# --------------------------------------------------------------------------- filtering / splitting


def filter_by_anomaly_pixels(samples: Iterable[ImageSample], min_pixels: int) -> list[ImageSample]:
    """Drop anomaly samples whose mask has fewer than ``min_pixels`` set pixels.

    Normal samples pass through unchanged; the boundary (exactly ``min_pixels``) is kept.
    """
    out = []
    for s in samples:
        if not s.is_anomaly:
            out.append(s)
            continue
        if "native_mask_pixels" in s.meta:
            count = int(s.meta["native_mask_pixels"])
        elif s.anomaly_mask is None:
            raise DataError(f"anomaly sample {s.id!r} has no mask")
        else:
            count = int(np.count_nonzero(s.anomaly_mask))
        if count >= min_pixels:
            out.append(s)
    return out


@dataclass(frozen=True)
class SplitSpec:
    train_frac: Fraction = Fraction(7, 10)
    val_frac: Fraction = Fraction(2, 10)
    test_frac: Fraction = Fraction(1, 10)
    seed: int = 0

    def __post_init__(self):
        fr = []
        for name in ("train_frac", "val_frac", "test_frac"):
            v = getattr(self, name)
            v = Fraction(v).limit_denominator(10**6) if isinstance(v, float) else Fraction(v)
            if v < 0:
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, v)
            fr.append(v)
        if sum(fr) != 1:
            raise ValueError(f"split fractions must sum to 1, got {float(sum(fr))}")

    def sizes(self, n: int) -> tuple[int, int, int]:
        sizes = [math.floor(n * f) for f in (self.train_frac, self.val_frac, self.test_frac)]
        for i in range(n - sum(sizes)):
            sizes[i % 3] += 1
        return tuple(sizes)


def split_dataset(samples: Sequence, spec: SplitSpec) -> dict[str, list]:
    """Shuffle with ``spec.seed`` and cut into train/val/test of :meth:`SplitSpec.sizes`."""
    if len(samples) == 0:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(spec.seed).permutation(len(samples))
    n_train, n_val, _ = spec.sizes(len(samples))
    cuts = {"train": order[:n_train], "val": order[n_train:n_train + n_val], "test": order[n_train + n_val:]}
    return {k: [samples[i] for i in idx] for k, idx in cuts.items()}


def downsample_image(pixels: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (half-pixel centers, no antialiasing) to a size no larger than the source."""
    src = np.asarray(pixels, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    H, W = src.shape[:2]
    h, w = target
    if h > H or w > W:
        raise ValueError(f"cannot upscale {H}x{W} to {h}x{w}")
    if (h, w) == (H, W):
        out = src.copy()
    else:
        def axis(n_out, n_in):
            x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
            x = np.clip(x, 0, n_in - 1)
            lo = np.floor(x).astype(int)
            hi = np.minimum(lo + 1, n_in - 1)
            return lo, hi, x - lo

        y0, y1, fy = axis(h, H)
        x0, x1, fx = axis(w, W)
        fy = fy[:, None, None]
        fx = fx[None, :, None]
        top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
        bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
        out = top * (1 - fy) + bot * fy
        out = np.clip(out, src.min(), src.max())
    out = out.astype(np.asarray(pixels).dtype if np.asarray(pixels).dtype.kind == "f" else np.float32)
    return out[..., 0] if squeeze else out


# --------------------------------------------------------------------------- class frequencies


@dataclass
class ClassFrequencyTable:
    pixel_counts: dict[int, int] = field(default_factory=dict)
    instance_counts: dict[int, int] = field(default_factory=dict)

    @property
    def total_pixels(self) -> int:
        return sum(self.pixel_counts.values())

    @property
    def total_instances(self) -> int:
        return sum(self.instance_counts.values())

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.pixel_counts) | set(self.instance_counts))

    def frequencies(self, basis: str = "pixel") -> dict[int, float]:
        counts = {"pixel": self.pixel_counts, "instance": self.instance_counts}[basis]
        total = sum(counts.values())
        if total == 0:
            raise ValueError("frequency table is empty")
        return {c: counts.get(c, 0) / total for c in self.classes}

    @classmethod
    def from_frequencies(cls, freqs: dict[int, float], scale: int = 10**6) -> "ClassFrequencyTable":
        counts = {int(c): int(round(f * scale)) for c, f in freqs.items()}
        return cls(pixel_counts=counts, instance_counts=dict(counts))


def compute_class_frequencies(label_maps: Iterable[np.ndarray]) -> ClassFrequencyTable:
    """Exact per-class pixel counts and 4-connected instance counts over ``label_maps``."""
    table = ClassFrequencyTable()
    for m in label_maps:
        m = np.asarray(m)
        classes, counts = np.unique(m, return_counts=True)
        for c, n in zip(classes.tolist(), counts.tolist()):
            table.pixel_counts[c] = table.pixel_counts.get(c, 0) + n
            _, n_inst = ndimage.label(m == c)
            table.instance_counts[c] = table.instance_counts.get(c, 0) + n_inst
    return table


# --------------------------------------------------------------------------- synthetic scenes

SKY, ROAD = 0, 1


@dataclass(frozen=True)
class ObjectClass:
    name: str
    shape: str
    colors: tuple[tuple[float, float, float], ...]
    size_range: tuple[float, float] = (0.1, 0.25)
    weight: float = 1.0


DEFAULT_NORMAL_VOCAB = (
    ObjectClass("car", "rect", ((0.55, 0.10, 0.10), (0.15, 0.20, 0.55), (0.35, 0.35, 0.38)), (0.16, 0.30), 0.40),
    ObjectClass("building", "tall_rect", ((0.45, 0.35, 0.25), (0.50, 0.50, 0.48)), (0.20, 0.35), 0.25),
    ObjectClass("tree", "disc", ((0.10, 0.40, 0.12), (0.20, 0.32, 0.10)), (0.12, 0.24), 0.20),
    ObjectClass("pole", "pole", ((0.20, 0.20, 0.20),), (0.15, 0.30), 0.10),
    ObjectClass("sign", "triangle", ((0.85, 0.75, 0.15),), (0.08, 0.14), 0.05),
)

DEFAULT_ANOMALY_VOCAB = (
    ObjectClass("cross", "cross", ((0.95, 0.10, 0.85),)),
    ObjectClass("diamond", "diamond", ((0.10, 0.95, 0.95),)),
    ObjectClass("ring", "ring", ((1.00, 0.55, 0.00),)),
)

_NORMAL_SHAPES = {"rect", "tall_rect", "disc", "pole", "triangle"}
_ANOMALY_SHAPES = {"cross", "diamond", "ring"}
# fraction of the bounding square covered by a shape; used to size anomalies by area
_FILL = {"cross": 5.0 / 9.0, "diamond": 0.5, "ring": math.pi * (1 - 0.45**2) / 4}


@dataclass(frozen=True)
class SynthSceneSpec:
    image_size: int = 64
    texture_noise: float = 0.03
    horizon_range: tuple[float, float] = (0.35, 0.5)
    objects_per_scene: tuple[int, int] = (2, 5)
    normal_vocab: tuple[ObjectClass, ...] = DEFAULT_NORMAL_VOCAB
    anomaly_vocab: tuple[ObjectClass, ...] = DEFAULT_ANOMALY_VOCAB
    anomaly_area_range: tuple[float, float] = (0.02, 0.10)
    color_jitter: float = 0.04
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.anomaly_area_range
        if not 0 < lo <= hi < 1:
            raise ValueError("anomaly_area_range must satisfy 0 < lo <= hi < 1")
        if self.image_size < 8:
            raise ValueError("image_size too small")
        if not self.normal_vocab or not self.anomaly_vocab:
            raise ValueError("both vocabularies must be nonempty")
        n_shapes = {o.shape for o in self.normal_vocab}
        a_shapes = {o.shape for o in self.anomaly_vocab}
        if not n_shapes <= _NORMAL_SHAPES or not a_shapes <= _ANOMALY_SHAPES:
            raise ValueError("unsupported object shape in vocabulary")
        n_colors = {c for o in self.normal_vocab for c in o.colors}
        a_colors = {c for o in self.anomaly_vocab for c in o.colors}
        n_names = {o.name for o in self.normal_vocab}
        a_names = {o.name for o in self.anomaly_vocab}
        if n_shapes & a_shapes or n_colors & a_colors or n_names & a_names:
            raise ValueError("normal and anomaly vocabularies must be disjoint")
        if any(o.weight < 0 for o in self.normal_vocab) or sum(o.weight for o in self.normal_vocab) <= 0:
            raise ValueError("normal class weights must be nonnegative with a positive sum")
        a, b = self.objects_per_scene
        if not 0 <= a <= b:
            raise ValueError("objects_per_scene must be an ordered nonnegative pair")

    def class_ids(self) -> dict[str, int]:
        """Integer class ids used in generated class maps: sky, road, normal vocab, anomaly vocab."""
        names = ["sky", "road"] + [o.name for o in self.normal_vocab] + [o.name for o in self.anomaly_vocab]
        return {n: i for i, n in enumerate(names)}

    def normal_weights(self) -> np.ndarray:
        w = np.array([o.weight for o in self.normal_vocab], dtype=float)
        return w / w.sum()


def _shape_mask(shape: str, yy, xx, cy, cx, h, w) -> np.ndarray:
    dy, dx = (yy - cy) / (h / 2), (xx - cx) / (w / 2)
    if shape in ("rect", "tall_rect", "pole"):
        return (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
    if shape == "disc":
        return dy**2 + dx**2 <= 1
    if shape == "triangle":
        t = (dy + 1) / 2  # 0 at apex, 1 at base
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t)
    if shape == "cross":
        bar = 1.0 / 3.0
        return ((np.abs(dy) <= 1) & (np.abs(dx) <= bar)) | ((np.abs(dx) <= 1) & (np.abs(dy) <= bar))
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1
    if shape == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= 1) & (r2 >= 0.45**2)
    raise ValueError(f"unknown shape {shape!r}")


def _jitter(rng, color, amount):
    return np.clip(np.asarray(color) + rng.uniform(-amount, amount, 3), 0.0, 1.0)


def _render_scene(spec: SynthSceneSpec, rng: np.random.Generator):
    S = spec.image_size
    ids = spec.class_ids()
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    horizon = rng.uniform(*spec.horizon_range) * S
    sky_top = np.array([0.45, 0.62, 0.85]) + rng.uniform(-0.05, 0.05, 3)
    sky_bot = np.array([0.75, 0.82, 0.90]) + rng.uniform(-0.05, 0.05, 3)
    road = np.array([0.40, 0.40, 0.42]) + rng.uniform(-0.04, 0.04)
    t = np.clip(yy / max(horizon, 1.0), 0, 1)[..., None]
    img = np.where((yy < horizon)[..., None], sky_top * (1 - t) + sky_bot * t, road)
    img = img + rng.normal(0.0, spec.texture_noise, img.shape)
    cmap = np.where(yy < horizon, ids["sky"], ids["road"]).astype(np.int32)

    weights = spec.normal_weights()
    n_obj = int(rng.integers(spec.objects_per_scene[0], spec.objects_per_scene[1] + 1))
    picks = rng.choice(len(spec.normal_vocab), size=n_obj, p=weights)
    objects = []
    for k in picks:
        cls = spec.normal_vocab[int(k)]
        s = rng.uniform(*cls.size_range) * S
        if cls.shape == "tall_rect":
            h, w = 1.6 * s, s
            cy = horizon - h / 2 + rng.uniform(0, 0.15) * S
        elif cls.shape == "pole":
            h, w = s, max(1.5, 0.08 * s)
            cy = horizon + rng.uniform(-0.1, 0.25) * S
        elif cls.shape == "rect":
            h, w = 0.55 * s, s
            cy = rng.uniform(horizon, S - h / 2)
        else:
            h = w = s
            cy = horizon + rng.uniform(-0.25, 0.2) * S
        cx = rng.uniform(0, S)
        m = _shape_mask(cls.shape, yy, xx, cy, cx, h, w)
        color = _jitter(rng, cls.colors[int(rng.integers(len(cls.colors)))], spec.color_jitter)
        img[m] = color + rng.normal(0.0, spec.texture_noise / 2, (int(m.sum()), 3))
        cmap[m] = ids[cls.name]
        objects.append(cls.name)
    return img, cmap, objects


def _place_anomaly(spec: SynthSceneSpec, rng: np.random.Generator, img, cmap):
    S = spec.image_size
    ids = spec.class_ids()
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    lo, hi = spec.anomaly_area_range
    cls = spec.anomaly_vocab[int(rng.integers(len(spec.anomaly_vocab)))]
    for _ in range(100):
        area = rng.uniform(lo, hi) * S * S
        side = math.sqrt(area / _FILL[cls.shape])
        if side > S:
            continue
        cy = rng.uniform(side / 2, S - side / 2)
        cx = rng.uniform(side / 2, S - side / 2)
        mask = _shape_mask(cls.shape, yy, xx, cy, cx, side, side)
        frac = mask.sum() / (S * S)
        if lo <= frac <= hi:
            break
    else:
        raise RuntimeError(f"could not place an anomaly within area range {spec.anomaly_area_range}")
    color = _jitter(rng, cls.colors[int(rng.integers(len(cls.colors)))], spec.color_jitter)
    img[mask] = color + rng.normal(0.0, spec.texture_noise / 2, (int(mask.sum()), 3))
    cmap[mask] = ids[cls.name]
    return mask, cls.name


def _make_sample(spec: SynthSceneSpec, kind: int, index: int) -> ImageSample:
    rng = np.random.default_rng([spec.seed, kind, index])
    img, cmap, objects = _render_scene(spec, rng)
    mask = None
    anomaly = None
    if kind == 1:
        mask, anomaly = _place_anomaly(spec, rng, img, cmap)
    label = ANOMALY if kind == 1 else NORMAL
    meta = {"objects": objects}
    if anomaly is not None:
        meta["anomaly_object"] = anomaly
    return ImageSample(
        id=f"synth-s{spec.seed}-{label}-{index:05d}",
        pixels=np.clip(img, 0.0, 1.0).astype(np.float32),
        label=label,
        anomaly_mask=mask if mask is not None else np.zeros((spec.image_size,) * 2, bool),
        dataset="synthetic",
        class_map=cmap,
        meta=meta,
    )


def generate_synthetic_dataset(spec: SynthSceneSpec, n_normal: int, n_anomaly: int) -> list[ImageSample]:
    """Normal street-like scenes followed by scenes with exactly one anomaly object each.

    Every sample draws from its own RNG stream keyed by (seed, kind, index), so the
    output does not depend on generation order.
    """
    if n_normal < 0 or n_anomaly < 0:
        raise ValueError("sample counts must be nonnegative")
    out = [_make_sample(spec, 0, i) for i in range(n_normal)]
    out += [_make_sample(spec, 1, i) for i in range(n_anomaly)]
    return out
