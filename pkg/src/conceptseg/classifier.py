"""Unsupervised concept classification.

Background detection works on the backbone's class-token attention: each
region scores the sum over its pixels of the per-pixel minimum across
attention heads (a pixel counts as foreground evidence only if every head
attends to it); a 1-D 2-means split sends the lower-scoring group to
background. Foreground regions are then labeled by k-means pseudo-classes,
a similarity-weighted k-NN vote against a labeled bank, or nearest
text-derived class embedding. Region and class embeddings arrive as data;
no backbone or language model runs here.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClassPrediction:
    """Region -> class assignment, broadcastable to a pixel mask."""

    classes: dict                     # region id -> class index
    flags: dict = field(default_factory=dict)
    soft: np.ndarray | None = None    # (regions, classes) vote weights

    def to_mask(self, region_mask, fill=-1):
        region_mask = np.asarray(region_mask)
        out = np.full(region_mask.shape, fill, dtype=np.int64)
        for region, cls in self.classes.items():
            out[region_mask == region] = cls
        return out


def min_head_attention(attention):
    """Per-pixel minimum over attention heads; shape (heads, n) -> (n,)."""
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim != 2:
        raise ValueError(f"attention must be (heads, n), got {attention.shape}")
    if (attention < 0).any():
        raise ValueError("attention values must be >= 0")
    return attention.min(axis=0)


def foreground_scores(region_pixels, attention, normalize=False):
    """Score each region by summing its pixels' min-over-heads attention.

    ``region_pixels`` maps region id -> flat pixel indices on the attention
    grid. ``normalize=True`` divides by pixel count (variant flag; the
    default raw sum favors larger regions by construction).
    """
    per_pixel = min_head_attention(attention)
    n = per_pixel.shape[0]
    scores = {}
    for region, idx in region_pixels.items():
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError(f"region {region} has no pixels")
        if idx.min() < 0 or idx.max() >= n:
            raise ValueError(
                f"region {region} indexes pixel {int(idx.max())} outside the "
                f"{n}-pixel attention grid (misaligned grids)")
        s = float(per_pixel[idx].sum())
        scores[region] = s / idx.size if normalize else s
    return scores


def regions_from_labels(labels):
    """region id -> flat pixel indices, from a per-pixel label vector."""
    labels = np.asarray(labels).reshape(-1)
    return {int(r): np.flatnonzero(labels == r) for r in np.unique(labels)}


def two_means_1d(values, max_iter=100):
    """Deterministic 1-D 2-means initialized at the min and max value."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return None
    c = np.array([lo, hi])
    assign = None
    for _ in range(max_iter):
        assign = (np.abs(values - c[0]) > np.abs(values - c[1])).astype(int)
        new_c = np.array([values[assign == j].mean() if np.any(assign == j) else c[j]
                          for j in (0, 1)])
        if np.array_equal(new_c, c):
            break
        c = new_c
    return assign, c


def split_background(scores):
    """Two-way split of region scores; the lower-mean cluster is background.

    Fewer than 2 regions, or identical scores, yields everything foreground
    (with a warning in the degenerate-score case).
    """
    ids = sorted(scores)
    if len(ids) < 2:
        return [], list(ids)
    values = np.array([scores[i] for i in ids])
    split = two_means_1d(values)
    if split is None:
        warnings.warn("identical foreground scores; no background split", RuntimeWarning)
        return [], list(ids)
    assign, centers = split
    bg_cluster = int(np.argmin(centers))
    background = [i for i, a in zip(ids, assign) if a == bg_cluster]
    foreground = [i for i, a in zip(ids, assign) if a != bg_cluster]
    if not foreground:          # everything scored low: keep regions usable
        return [], list(ids)
    return background, foreground


def kmeans_classify(embeddings, num_classes, seed=0, restarts=10, region_ids=None):
    """Cluster region embeddings into pseudo-classes.

    The labels are cluster indices; mapping clusters onto dataset classes is
    evaluation's job (Hungarian matching over pixel overlap, repeated runs
    reported mean +/- std).
    """
    from .baselines import kmeans

    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] < num_classes:
        raise ValueError(
            f"{embeddings.shape[0]} region embeddings < {num_classes} classes")
    labels, _, _ = kmeans(embeddings, num_classes, restarts=restarts, seed=seed)
    ids = range(len(labels)) if region_ids is None else region_ids
    return ClassPrediction(classes={int(r): int(l) for r, l in zip(ids, labels)})


def average_region_embeddings(features, labels, region_ids):
    """One embedding per region: the mean of its pixels' feature rows
    (the pixel-averaging route; masked re-encoding comes from the extractor
    as data)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    rows = []
    for r in region_ids:
        members = features[labels == r]
        if members.shape[0] == 0:
            raise ValueError(f"region {r} has no pixels")
        rows.append(members.mean(axis=0))
    return np.stack(rows)


def cosine_matrix(a, b, eps=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / (np.linalg.norm(a, axis=1, keepdims=True) + eps)
    bn = b / (np.linalg.norm(b, axis=1, keepdims=True) + eps)
    return an @ bn.T


def knn_classify(query, bank_embeddings, bank_labels, k, num_classes=None,
                 region_ids=None):
    """Similarity-weighted k-NN vote.

    The soft label of a query is the cosine-similarity-weighted average of
    its k nearest bank entries' one-hot labels; the class is the argmax.
    k is clamped (with a warning) when the bank is smaller.
    """
    bank_embeddings = np.asarray(bank_embeddings, dtype=np.float64)
    bank_labels = np.asarray(bank_labels, dtype=np.int64)
    if bank_embeddings.shape[0] == 0:
        raise ValueError("empty bank")
    if k > bank_embeddings.shape[0]:
        warnings.warn(f"k={k} larger than bank ({bank_embeddings.shape[0]}); clamped",
                      RuntimeWarning)
        k = bank_embeddings.shape[0]
    if num_classes is None:
        num_classes = int(bank_labels.max()) + 1
    sims = cosine_matrix(query, bank_embeddings)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    soft = np.zeros((sims.shape[0], num_classes))
    for row in range(sims.shape[0]):
        for col in order[row]:
            soft[row, bank_labels[col]] += sims[row, col]
    totals = soft.sum(axis=1, keepdims=True)
    soft = np.where(totals > 0, soft / np.where(totals > 0, totals, 1.0), soft)
    labels = soft.argmax(axis=1)
    ids = range(len(labels)) if region_ids is None else region_ids
    return ClassPrediction(classes={int(r): int(l) for r, l in zip(ids, labels)},
                           soft=soft)


def text_classify(region_embeddings, class_embeddings, region_ids=None):
    """Nearest class embedding by cosine; exact ties go to the lowest class
    index and are flagged."""
    region_embeddings = np.asarray(region_embeddings, dtype=np.float64)
    class_embeddings = np.asarray(class_embeddings, dtype=np.float64)
    if region_embeddings.shape[1] != class_embeddings.shape[1]:
        raise ValueError(
            f"embedding dim mismatch: regions {region_embeddings.shape[1]} vs "
            f"classes {class_embeddings.shape[1]}")
    sims = cosine_matrix(region_embeddings, class_embeddings)
    labels = sims.argmax(axis=1)
    ids = list(range(len(labels))) if region_ids is None else list(region_ids)
    flags = {}
    for row, rid in enumerate(ids):
        best = sims[row, labels[row]]
        if np.sum(np.isclose(sims[row], best, rtol=0, atol=1e-12)) > 1:
            flags[int(rid)] = "tie"
    return ClassPrediction(
        classes={int(r): int(l) for r, l in zip(ids, labels)}, flags=flags)
