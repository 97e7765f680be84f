"""Experiment configuration: YAML files, dotted-key overrides and a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import yaml

from clvae.datamodel import SplitSpec, SynthSceneSpec
from clvae.losses import RECON_REDUCTIONS, LossWeights
from clvae.vae import VaeSpec


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    latent_channels: int = 64
    image_size: int = 64
    widths: list = field(default_factory=lambda: [16, 32, 64, 64])
    rrelu_lower: float = 1.0 / 8.0
    rrelu_upper: float = 1.0 / 3.0
    extra_pool: bool = False
    prior_delta: float = 3.0


@dataclass
class LossConfig:
    beta: float = 0.01
    w_distance: float = 0.0
    w_cluster: float = 0.0
    w_perceptual: float = 0.5
    distance_radius: float = 100.0
    recon_reduction: str = "sum"  # "sum": per-image sum (ELBO scale); "mean": per-pixel mean


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "manifest"
    manifest: str | None = None
    n_normal: int = 500
    n_anomaly: int = 100
    n_total: int | None = None  # if set, overrides n_normal/n_anomaly via anomaly_fraction
    anomaly_fraction: float = 0.3
    anomaly_area_range: list = field(default_factory=lambda: [0.02, 0.10])
    texture_noise: float = 0.03
    objects_per_scene: list = field(default_factory=lambda: [2, 5])
    split: list = field(default_factory=lambda: ["7/10", "2/10", "1/10"])
    min_anomaly_pixels: int = 3000
    max_per_scene: int | None = None

    def counts(self) -> tuple[int, int]:
        if self.n_total is None:
            return self.n_normal, self.n_anomaly
        n_anom = int(round(self.n_total * self.anomaly_fraction))
        return self.n_total - n_anom, n_anom


@dataclass
class DiscrepancyConfig:
    provider: str = "oracle"  # or "file"
    noise_level: float = 0.05
    directory: str | None = None


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 12
    lr: float = 1e-4
    linear_decay: bool = True
    adam_betas: list = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    anomaly_fraction: float | None = None  # per-batch mixing; None keeps the natural ratio
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint


@dataclass
class AblationConfig:
    use_discrepancy: bool = False
    use_distance_loss: bool = False
    use_cluster_loss: bool = False
    use_perceptual_loss: bool = True


@dataclass
class SeedConfig:
    model: int = 0
    data: int = 0
    backbone: int = 1234


@dataclass
class EvalConfig:
    kmeans_k: int = 2
    kmeans_seed: int = 0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    discrepancy: DiscrepancyConfig = field(default_factory=DiscrepancyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"

    # ---- construction

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        cfg = cls()
        for key, value in _flatten(d or {}).items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(self.to_dict())

    # ---- dotted access

    def set(self, key: str, value: Any) -> None:
        *parents, leaf = key.split(".")
        target = self
        for p in parents:
            if not dataclasses.is_dataclass(target) or not hasattr(target, p):
                raise ConfigError(f"unknown config key {key!r}")
            target = getattr(target, p)
        names = {f.name: f for f in dataclasses.fields(target)} if dataclasses.is_dataclass(target) else {}
        if leaf not in names or dataclasses.is_dataclass(getattr(target, leaf)):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, leaf, _coerce(value, getattr(target, leaf), names[leaf], key))

    def get(self, key: str) -> Any:
        target = self
        for p in key.split("."):
            if not hasattr(target, p):
                raise ConfigError(f"unknown config key {key!r}")
            target = getattr(target, p)
        return target

    def override(self, pairs: dict[str, Any]) -> "ExperimentConfig":
        cfg = self.copy()
        for k, v in pairs.items():
            cfg.set(k, v)
        cfg.validate()
        return cfg

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.override({"seeds.model": seed, "seeds.data": seed, "seeds.backbone": seed,
                              "eval.kmeans_seed": seed})

    # ---- validation and typed views

    def validate(self) -> None:
        t = self.train
        if t.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not t.lr > 0:
            raise ConfigError("train.lr must be > 0")
        if t.anomaly_fraction is not None and not 0 <= t.anomaly_fraction < 1:
            raise ConfigError("train.anomaly_fraction must be in [0, 1)")
        if self.data.source not in ("synthetic", "manifest"):
            raise ConfigError("data.source must be 'synthetic' or 'manifest'")
        if self.data.source == "manifest" and not self.data.manifest:
            raise ConfigError("data.source=manifest needs data.manifest")
        if self.discrepancy.provider not in ("oracle", "file"):
            raise ConfigError("discrepancy.provider must be 'oracle' or 'file'")
        if self.eval.kmeans_k < 2:
            raise ConfigError("eval.kmeans_k must be >= 2")
        if self.loss.recon_reduction not in RECON_REDUCTIONS:
            raise ConfigError(f"loss.recon_reduction must be one of {RECON_REDUCTIONS}")
        if self.loss.distance_radius <= 0:
            raise ConfigError("loss.distance_radius must be positive")
        try:
            self.vae_spec()
            self.loss_weights()
            self.split_spec()
            if self.data.source == "synthetic":
                self.scene_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def vae_spec(self) -> VaeSpec:
        m = self.model
        return VaeSpec(
            input_channels=4 if self.ablation.use_discrepancy else 3,
            latent_channels=m.latent_channels, image_size=m.image_size, widths=tuple(m.widths),
            rrelu_lower=m.rrelu_lower, rrelu_upper=m.rrelu_upper, extra_pool=m.extra_pool,
            seed=self.seeds.model,
        )

    def loss_weights(self) -> LossWeights:
        l = self.loss
        return LossWeights(beta=l.beta, w_distance=l.w_distance, w_cluster=l.w_cluster, w_perceptual=l.w_perceptual)

    def split_spec(self) -> SplitSpec:
        if len(self.data.split) != 3:
            raise ConfigError("data.split needs three fractions")
        fr = [Fraction(str(v)) for v in self.data.split]
        return SplitSpec(*fr, seed=self.seeds.data)

    def scene_spec(self) -> SynthSceneSpec:
        d = self.data
        return SynthSceneSpec(
            image_size=self.model.image_size, texture_noise=d.texture_noise,
            objects_per_scene=tuple(d.objects_per_scene), anomaly_area_range=tuple(d.anomaly_area_range),
            seed=self.seeds.data,
        )

    # ---- identity

    def canonical_json(self) -> bytes:
        d = self.to_dict()
        d.pop("output_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json()).hexdigest()[:16]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.hash()


def config_hash_of_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, current, f: dataclasses.Field, key: str):
    if isinstance(value, str):
        try:
            parsed = yaml.safe_load(value)
        except yaml.YAMLError:
            parsed = value
        # keep strings for string-typed fields even if they look like something else
        if isinstance(current, str) and not isinstance(parsed, str) and parsed is not None:
            parsed = value
        value = parsed
    if value is None:
        if "None" not in str(f.type):
            raise ConfigError(f"{key} cannot be null")
        return None
    want = type(current) if current is not None else None
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if want is int or (want is None and "int" in str(f.type) and "float" not in str(f.type)):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} expects an integer, got {value!r}") from None
    if want is float or (want is None and "float" in str(f.type)):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} expects a number, got {value!r}") from None
    if want is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return list(value)
    if want is str or (want is None and "str" in str(f.type)):
        return str(value)
    return value


DEFAULT_CONFIG = ExperimentConfig()
