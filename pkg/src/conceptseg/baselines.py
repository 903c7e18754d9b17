"""Classical per-image clustering baselines.

k-means (plus-plus seeding, restarts, objective history) and spectral
clustering (symmetric normalized Laplacian, dense eigensolver, k-means on
the spectral embedding) are implemented here; affinity propagation and
agglomerative clustering are delegated to scikit-learn with the reference
hyperparameters (damping 0.5 / preference -2; distance threshold 0.65 on
cosine distance with average linkage).
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

METHODS = ("kmeans", "spectral", "affinity_propagation", "agglomerative")


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "kmeans"
    n_clusters: int = 5
    n_components: int = 5            # spectral embedding width
    damping: float = 0.5             # affinity propagation
    preference: float = -2.0
    distance_threshold: float = 0.65  # agglomerative, on 1 - cosine
    linkage: str = "average"
    restarts: int = 10               # k-means
    max_iter: int = 300
    tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")


def kmeans_plus_plus(x, k, rng):
    """Plus-plus seeding: centers drawn proportional to squared distance."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centers[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _kmeans_once(x, k, rng, max_iter, tol):
    centers = kmeans_plus_plus(x, k, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new_centers = centers.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        shift = float(((new_centers - centers) ** 2).sum())
        centers = new_centers
        if shift <= tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(x)), labels].sum()))
    return labels, centers, history


def kmeans(x, k, restarts=10, max_iter=300, tol=1e-4, seed=0):
    """Best-of-restarts k-means.

    Convergence: summed squared center shift <= tol. Returns
    (labels, centers, objective_history) for the restart with the lowest
    final within-cluster sum of squares; the history is non-increasing.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"kmeans: {x.shape[0]} points < {k} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        labels, centers, history = _kmeans_once(x, k, rng, max_iter, tol)
        if best is None or history[-1] < best[2][-1]:
            best = (labels, centers, history)
    return best


def cosine_affinity(x):
    """Clamped pairwise cosine with exact unit diagonal (shared convention
    with the training graph)."""
    from .modularity import build_affinity

    return build_affinity(x).weights


def spectral_embedding(affinity, n_components):
    """Rows of the bottom eigenvectors of the symmetric normalized Laplacian.

    Dense eigensolver (numpy.linalg.eigh); rows are L2-normalized before
    k-means, so exactly disconnected components map to orthogonal points.
    """
    a = np.asarray(affinity, dtype=np.float64)
    deg = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0))
    lap = np.eye(len(a)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    vals, vecs = np.linalg.eigh(lap)
    emb = vecs[:, np.argsort(vals)[:n_components]]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.where(norms > 0, norms, 1.0)


def spectral_clustering(x, n_clusters, n_components=None, seed=0, affinity=None):
    if affinity is None:
        affinity = cosine_affinity(np.asarray(x, dtype=np.float64))
    emb = spectral_embedding(affinity, n_components or n_clusters)
    labels, _, _ = kmeans(emb, n_clusters, restarts=10, seed=seed)
    return labels


def cluster_image(x, cfg):
    """Per-pixel cluster labels for one image's embeddings; deterministic
    for a fixed config seed."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.method == "kmeans":
        labels, _, _ = kmeans(x, cfg.n_clusters, restarts=cfg.restarts,
                              max_iter=cfg.max_iter, tol=cfg.tol, seed=cfg.seed)
        return labels
    if cfg.method == "spectral":
        return spectral_clustering(x, cfg.n_clusters, cfg.n_components, seed=cfg.seed)
    if cfg.method == "affinity_propagation":
        from sklearn.cluster import AffinityPropagation
        from sklearn.exceptions import ConvergenceWarning

        sim = cosine_affinity(x)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            ap = AffinityPropagation(damping=cfg.damping, preference=cfg.preference,
                                     affinity="precomputed", random_state=cfg.seed)
            labels = ap.fit_predict(sim)
        if (labels < 0).any():
            log.warning("affinity propagation failed to converge; "
                        "falling back to a single cluster")
            warnings.warn("affinity propagation did not converge", RuntimeWarning)
            return np.zeros(len(x), dtype=np.int64)
        return labels
    if cfg.method == "agglomerative":
        from sklearn.cluster import AgglomerativeClustering

        dist = 1.0 - cosine_affinity(x)
        model = AgglomerativeClustering(n_clusters=None,
                                        distance_threshold=cfg.distance_threshold,
                                        metric="precomputed", linkage=cfg.linkage)
        return model.fit_predict(dist)
    raise ValueError(f"unknown method {cfg.method!r}")


def throughput_harness(fmaps, configs):
    """Images/second per clustering method (speed-comparison table shape)."""
    out = {}
    for cfg in configs:
        t0 = time.perf_counter()
        for fm in fmaps:
            cluster_image(fm.features, cfg)
        dt = time.perf_counter() - t0
        out[cfg.method] = len(fmaps) / dt if dt > 0 else float("inf")
    return out
