"""Synthetic feature-map generator with exact ground truth.

Each image gets a random number of clusters; cluster centers are unit
vectors pairwise separated below a cosine bound, the grid is partitioned
into contiguous blobs (Voronoi cells of random seed pixels, resampled until
every blob clears a minimum size), and per-pixel features are the blob's
center plus Gaussian noise. The separation/noise ratio is recorded in each
map's metadata so the ground-truth partition is well defined.

By default cluster directions are drawn per image from a shared orthonormal
pool with small per-image jitter, mirroring feature spaces where the same
semantic directions recur across a corpus; ``direction_pool=0`` switches to
fresh rejection-sampled directions per image.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataio import FeatureMap

CENTER_RETRY_LIMIT = 500


class SeparationError(RuntimeError):
    """Could not sample enough centers under the pairwise-cosine bound."""


@dataclass(frozen=True)
class SyntheticSpec:
    clusters_min: int = 2
    clusters_max: int = 4
    dim: int = 32
    grid: int = 12
    max_center_cos: float = 0.1
    noise_std: float = 0.02
    min_cell_fraction: float = 0.08   # smallest blob, as a fraction of pixels
    direction_pool: int = 5           # shared directions; 0 = fresh per image
    direction_jitter: float = 0.1     # per-image center perturbation (pool mode)
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.clusters_min <= self.clusters_max):
            raise ValueError("invalid cluster range")
        if self.clusters_max > self.grid * self.grid:
            raise ValueError("more clusters than grid cells")
        if self.min_cell_fraction * self.clusters_max >= 1.0:
            raise ValueError("min_cell_fraction infeasible for clusters_max")
        if self.direction_pool:
            if self.direction_pool > self.dim:
                raise ValueError("direction_pool larger than dim (orthonormal pool)")
            if self.direction_pool < self.clusters_max:
                raise ValueError("direction_pool smaller than clusters_max")


def sample_centers(rng, count, dim, max_cos):
    """Unit vectors with pairwise |cosine| < max_cos (rejection sampling)."""
    centers = []
    tries = 0
    while len(centers) < count:
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ c)) < max_cos for c in centers):
            centers.append(v)
        else:
            tries += 1
            if tries > CENTER_RETRY_LIMIT:
                raise SeparationError(
                    f"cannot place {count} centers at pairwise cos < {max_cos} in dim {dim}")
    return np.stack(centers)


def direction_pool(rng, count, dim):
    """Orthonormal shared directions (rows of a random orthogonal matrix)."""
    q = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
    return q[:count]


def voronoi_labels(rng, grid, count, min_cells=1):
    """Contiguous blobs: each cell goes to its nearest of `count` seed cells.

    Seed layouts whose smallest blob would fall under ``min_cells`` pixels
    are resampled, so every ground-truth cluster is a usable target.
    """
    ys, xs = np.mgrid[0:grid, 0:grid]
    coords = np.stack([ys.ravel(), xs.ravel()], axis=1)
    for _ in range(CENTER_RETRY_LIMIT):
        cells = rng.choice(grid * grid, size=count, replace=False)
        seeds = np.stack([cells // grid, cells % grid], axis=1)
        d2 = ((coords[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        if np.bincount(labels, minlength=count).min() >= min_cells:
            return labels.reshape(grid, grid)
    raise SeparationError(
        f"cannot lay out {count} blobs of >= {min_cells} cells on a {grid}x{grid} grid")


def _jittered_centers(rng, pool, chosen, jitter, max_cos):
    for _ in range(CENTER_RETRY_LIMIT):
        centers = pool[chosen] + jitter * rng.normal(size=(len(chosen), pool.shape[1]))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        gram = np.abs(centers @ centers.T - np.eye(len(chosen)))
        if gram.max() < max_cos:
            return centers
    raise SeparationError("jitter keeps violating the center separation bound")


def generate_image(spec, rng, image_id, pool=None):
    count = int(rng.integers(spec.clusters_min, spec.clusters_max + 1))
    if pool is not None:
        chosen = rng.choice(len(pool), size=count, replace=False)
        centers = _jittered_centers(rng, pool, chosen, spec.direction_jitter,
                                    spec.max_center_cos)
    else:
        centers = sample_centers(rng, count, spec.dim, spec.max_center_cos)
    min_cells = max(1, int(spec.min_cell_fraction * spec.grid * spec.grid))
    labels = voronoi_labels(rng, spec.grid, count, min_cells=min_cells)
    flat = labels.reshape(-1)
    features = centers[flat] + rng.normal(scale=spec.noise_std,
                                          size=(spec.grid * spec.grid, spec.dim))
    return FeatureMap(
        image_id=image_id,
        grid_h=spec.grid, grid_w=spec.grid, dim=spec.dim,
        features=features,
        labels=labels,
        meta={"synthetic": asdict(spec), "num_clusters": count,
              "separation_noise_ratio": spec.max_center_cos / max(spec.noise_std, 1e-12)},
    )


def generate_synthetic(spec, num_images, id_prefix="synth"):
    """List of FeatureMaps with ground-truth cluster labels."""
    rng = np.random.default_rng(spec.seed)
    pool = (direction_pool(rng, spec.direction_pool, spec.dim)
            if spec.direction_pool else None)
    return [generate_image(spec, rng, f"{id_prefix}-{i:05d}", pool=pool)
            for i in range(num_images)]
