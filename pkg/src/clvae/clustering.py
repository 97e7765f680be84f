"""k-means classification of latent codes and PCA projections for scatter plots."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from clvae.datamodel import ANOMALY, LABELS, NORMAL

CONVERGENCE_TOL = 1e-6
MAX_ITER = 300


class NotFittedError(RuntimeError):
    pass


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    inertia: float
    seed: int
    n_iter: int = 0
    counts: list[int] = field(default_factory=list)
    sse_history: list[float] = field(default_factory=list)
    cluster_to_label: dict[int, str] | None = None
    anomaly_fraction: list[float] | None = None

    @property
    def is_mapped(self) -> bool:
        return self.cluster_to_label is not None

    def assign(self, points) -> np.ndarray:
        d2 = _sq_dists(np.atleast_2d(np.asarray(points, dtype=np.float64)), self.centroids)
        return np.argmin(d2, axis=1)

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"centroids": self.centroids}
        return arrays

    def to_meta(self) -> dict:
        return {
            "k": self.k, "inertia": self.inertia, "seed": self.seed, "n_iter": self.n_iter,
            "counts": list(self.counts),
            "cluster_to_label": None if self.cluster_to_label is None
            else {str(c): l for c, l in self.cluster_to_label.items()},
            "anomaly_fraction": self.anomaly_fraction,
        }

    @classmethod
    def from_parts(cls, meta: dict, centroids: np.ndarray) -> "ClusterModel":
        mapping = meta.get("cluster_to_label")
        return cls(
            k=int(meta["k"]), centroids=np.asarray(centroids, dtype=np.float64), inertia=float(meta["inertia"]),
            seed=int(meta["seed"]), n_iter=int(meta.get("n_iter", 0)), counts=list(meta.get("counts", [])),
            cluster_to_label=None if mapping is None else {int(c): l for c, l in mapping.items()},
            anomaly_fraction=meta.get("anomaly_fraction"),
        )


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _canonical_order(x: np.ndarray) -> np.ndarray:
    # lexicographic row order: the fit then does not depend on input order
    return np.lexsort(x.T[::-1])


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(x)))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total), side="right"))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_fit(latents, k: int = 2, seed: int = 0, tol: float = CONVERGENCE_TOL,
               max_iter: int = MAX_ITER) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations.

    Stops once no centroid moves more than ``tol`` (absolute, Euclidean) or after
    ``max_iter`` iterations.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(len(x), -1)
    if len(np.unique(x, axis=0)) < k:
        raise ValueError(f"k-means needs at least {k} distinct points")
    x = x[_canonical_order(x)]
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), assign].sum()))
        new = centroids.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # empty cluster: take over the point farthest from its centroid
                far = int(np.argmax(d2[np.arange(len(x)), assign]))
                new[j] = x[far]
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centroids)
    assign = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(x)), assign].sum())
    history.append(inertia)
    return ClusterModel(
        k=k, centroids=centroids, inertia=inertia, seed=seed, n_iter=n_iter,
        counts=np.bincount(assign, minlength=k).tolist(), sse_history=history,
    )


def map_clusters_to_labels(model: ClusterModel, latents, labels) -> ClusterModel:
    """Attach a cluster -> label mapping learned from labeled latents.

    With k=2 and both labels present, the cluster with the larger anomaly fraction
    becomes ``anomaly`` and the other ``normal`` (this agrees with per-cluster
    majority whenever the majorities differ; on equal fractions cluster 0 is
    normal). With k>2 each cluster takes its majority label, ties going to
    ``anomaly``. If only one label is present every cluster maps to it.
    """
    labels = [l if l in LABELS else (ANOMALY if l in (1, True) else NORMAL) for l in labels]
    if len(labels) == 0:
        raise ValueError("cannot map clusters without labeled latents")
    assign = model.assign(latents)
    is_anom = np.array([l == ANOMALY for l in labels])
    frac = []
    for j in range(model.k):
        m = assign == j
        frac.append(float(is_anom[m].mean()) if m.any() else 0.0)
    present = set(labels)
    if len(present) == 1:
        mapping = {j: labels[0] for j in range(model.k)}
    elif model.k == 2:
        anomalous = 1 if frac[1] > frac[0] else 0
        mapping = {anomalous: ANOMALY, 1 - anomalous: NORMAL}
    else:
        mapping = {j: ANOMALY if frac[j] >= 0.5 else NORMAL for j in range(model.k)}
    model.cluster_to_label = mapping
    model.anomaly_fraction = frac
    return model


def classify(model: ClusterModel, latent) -> str:
    """Label of the nearest centroid; exact distance ties resolve to ``anomaly``."""
    return classify_batch(model, np.asarray(latent, dtype=np.float64).reshape(1, -1))[0]


def classify_batch(model: ClusterModel, latents) -> list[str]:
    if not model.is_mapped:
        raise NotFittedError("cluster model has no label mapping; call map_clusters_to_labels first")
    d2 = _sq_dists(np.asarray(latents, dtype=np.float64).reshape(len(latents), -1), model.centroids)
    out = []
    for row in d2:
        nearest = np.flatnonzero(row == row.min())
        names = {model.cluster_to_label[int(j)] for j in nearest}
        out.append(ANOMALY if ANOMALY in names else NORMAL)
    return out


def anomaly_scores(model: ClusterModel, latents) -> np.ndarray:
    """Distance to the nearest normal-labelled centroid; larger means more anomalous."""
    if not model.is_mapped:
        raise NotFittedError("cluster model has no label mapping")
    normal = [j for j, l in model.cluster_to_label.items() if l == NORMAL]
    if not normal:
        raise ValueError("no cluster is mapped to the normal label")
    d2 = _sq_dists(np.asarray(latents, dtype=np.float64).reshape(len(latents), -1), model.centroids[normal])
    return np.sqrt(d2.min(axis=1))


@dataclass
class PcaProjection:
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray

    def project(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
        return (x - self.mean) @ self.components.T

    def reconstruct(self, coords) -> np.ndarray:
        return np.asarray(coords) @ self.components + self.mean


def pca_fit_project(latents) -> tuple[PcaProjection, np.ndarray]:
    """Top two principal components of the centered latents and the projected points."""
    x = np.asarray(latents, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 3:
        raise ValueError("PCA needs at least 3 points")
    if x.shape[1] < 2:
        raise ValueError("PCA needs at least 2 dimensions")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:2].copy()
    var = np.zeros(2)
    var[: len(s[:2])] = s[:2] ** 2 / (len(x) - 1)
    for i in range(2):
        # sign convention: largest-magnitude loading is positive
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] *= -1
    proj = PcaProjection(comps, var, mean)
    return proj, proj.project(x)


SCATTER_HEADER = ["sample_id", "pc1", "pc2", "true_label", "predicted_label", "dataset"]


def write_scatter_csv(path, ids, coords, true_labels, predicted, datasets) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCATTER_HEADER)
        for row in zip(ids, coords[:, 0], coords[:, 1], true_labels, predicted, datasets):
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), *row[3:]])
