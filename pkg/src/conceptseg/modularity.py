"""Per-image affinity graph and the differentiable modularity objective.

The affinity graph lives on the *fixed* pixel embeddings (clamped pairwise
cosine), so it is plain numpy and cached per image; only the pixel-concept
soft assignment carries gradients. The loss compares actual edge density
against the degree-preserving random null model and rewards assigning
strongly connected pixel pairs to the same concept:

    w_ij = A_ij - k_i k_j / 2m
    delta(i, j) = max_c relu(S)_ic * relu(S)_jc
    L = -(1/2m) * sum_ij w_ij * delta(i, j)

The double sum runs over all ordered pairs including i = j (degrees include
the unit self-edge); ``include_diagonal=False`` is available for ablation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class AffinityGraph:
    """Clamped-cosine affinity weights with degrees and total edge weight."""

    weights: np.ndarray   # (n, n) symmetric, entries in [0, 1]
    degrees: np.ndarray   # (n,) row sums
    two_m: float          # sum of all entries

    @property
    def num_vertices(self):
        return self.weights.shape[0]


def build_affinity(x):
    """Fully connected affinity graph on pixel embeddings.

    A[i, j] = max(0, cos<x_i, x_j>), truncated at zero to avoid negative
    edges. The diagonal is exactly 1 for nonzero rows (a vector's cosine
    with itself); all-zero rows are guarded to similarity 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"build_affinity needs an (n>=2, d) matrix, got {x.shape}")
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    nonzero = norms[:, 0] > 0
    xn = x / np.where(norms > 0, norms, 1.0)
    a = np.maximum(0.0, xn @ xn.T)
    diag = np.where(nonzero, 1.0, 0.0)
    np.fill_diagonal(a, diag)
    degrees = a.sum(axis=1)
    two_m = float(degrees.sum())
    if two_m <= 0.0:
        raise ValueError("affinity graph has zero total edge weight (all rows zero)")
    return AffinityGraph(weights=a, degrees=degrees, two_m=two_m)


def modularity_weights(graph):
    """Pairwise intensity of same-concept assignment: w = A - k k^T / 2m.

    Entries sum to zero exactly (actual density minus the expected density
    of a degree-preserving random graph).
    """
    if graph.two_m <= 0.0:
        raise ValueError("modularity_weights: total edge weight must be positive")
    k = graph.degrees
    return graph.weights - np.outer(k, k) / graph.two_m


def pair_agreement(soft):
    """delta(i, j) = max_c relu(S)_ic * relu(S)_jc as a fused tape op.

    Only the best shared concept per pair contributes, so prototype updates
    are never pulled by unrelated pairs; the gradient flows through *both*
    selected factors. Ties pick the lowest concept index.
    """
    soft = soft if isinstance(soft, ad.Tensor) else ad.Tensor(soft)
    sbar = ad.relu(soft)
    s = sbar.data
    n = s.shape[0]
    prod = s[:, None, :] * s[None, :, :]           # (n, n, k)
    cstar = prod.argmax(axis=2)
    delta = np.take_along_axis(prod, cstar[..., None], axis=2)[..., 0]

    rows_i = np.repeat(np.arange(n), n)
    rows_j = np.tile(np.arange(n), n)
    cflat = cstar.ravel()

    def back(g):
        gflat = g.ravel()
        grad = np.zeros_like(s)
        np.add.at(grad, (rows_i, cflat), gflat * s[rows_j, cflat])
        np.add.at(grad, (rows_j, cflat), gflat * s[rows_i, cflat])
        sbar._accumulate(grad)

    return ad.custom_op(delta, (sbar,), back, "pair_agreement")


def modularity_loss(graph, soft, include_diagonal=True, weights=None):
    """Scalar per-image loss L = -(1/2m) * sum_ij w_ij * delta(i, j).

    Like modularity itself, the total edge weight 2m self-normalizes each
    image, which is what makes per-image losses comparable inside a batch.
    The minimum does not depend on the concept count, so the trained
    network is free to leave concepts unused.

    ``weights`` takes a precomputed modularity_weights(graph) matrix (the
    graph is fixed per image, so trainers cache it).
    """
    if graph.two_m <= 0.0:
        raise ValueError("modularity_loss: total edge weight must be positive")
    w = modularity_weights(graph) if weights is None else weights
    if not include_diagonal:
        w = w.copy()
        np.fill_diagonal(w, 0.0)
    delta = pair_agreement(soft)
    weighted = ad.multiply(delta, ad.Tensor(w))
    return ad.sum_(weighted) * (-1.0 / graph.two_m)
