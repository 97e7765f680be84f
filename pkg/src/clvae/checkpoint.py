"""Checkpoint archive: named float arrays plus one JSON metadata blob, in a single ``.npz``.

Keys:
    ``param/<name>``      model weights
    ``prior/m_normal``    prior means
    ``prior/m_anomaly``
    ``cluster/centroids`` (optional) fitted k-means centroids
    ``__meta__``          UTF-8 JSON: format version, VaeSpec, step, seeds, config, cluster model
"""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from clvae.clustering import ClusterModel
from clvae.vae import ConditionedVAE, PriorSet, VaeSpec

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ConditionedVAE
    priors: PriorSet
    config: dict | None = None
    cluster: ClusterModel | None = None
    extra: dict | None = None


def save_checkpoint(path, model: ConditionedVAE, priors: PriorSet, config: dict | None = None,
                    cluster: ClusterModel | None = None, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["prior/m_normal"] = priors.m_normal
    arrays["prior/m_anomaly"] = priors.m_anomaly
    meta = {
        "format": "clvae-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "step": int(model.step),
        "seed": model.spec.seed,
        "config": config,
        "cluster": None,
        "extra": extra or {},
    }
    if cluster is not None:
        arrays["cluster/centroids"] = cluster.centroids
        meta["cluster"] = cluster.to_meta()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: no metadata blob")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("format") != "clvae-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version "
                              f"{meta.get('format')!r}/{meta.get('version')!r}")
    spec_d = dict(meta["spec"])
    spec_d["widths"] = tuple(spec_d["widths"])
    model = ConditionedVAE(VaeSpec(**spec_d))
    state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param/")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match the stored spec ({exc})") from None
    model.step = int(meta["step"])
    model.eval()
    priors = PriorSet(arrays["prior/m_normal"], arrays["prior/m_anomaly"])
    cluster = None
    if meta.get("cluster") is not None:
        cluster = ClusterModel.from_parts(meta["cluster"], arrays["cluster/centroids"])
    return Checkpoint(model, priors, meta.get("config"), cluster, meta.get("extra"))
