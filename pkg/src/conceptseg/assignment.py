"""Pixel-to-concept assignment: cosine soft assignment, argmax hard labels,
and bilinear restoration of the soft assignment to image resolution.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

COSINE_EPS = 1e-12


@dataclass
class AssignmentMatrix:
    """Soft cosine assignment S (n x k), hard labels, and the active set.

    ``active_concepts`` is the image of the hard labels: concepts assigned at
    least one pixel. Its size is the per-image region count, which varies
    freely between images.
    """

    soft: np.ndarray
    hard: np.ndarray = field(init=False)
    active_concepts: tuple = field(init=False)

    def __post_init__(self):
        self.soft = np.asarray(self.soft)
        self.hard, self.active_concepts = hard_assign(self.soft)

    @property
    def num_regions(self):
        return len(self.active_concepts)


def soft_assign(x, concepts, assume_normalized_x=False):
    """Cosine similarity of every pixel embedding against every concept.

    Returns an autodiff tensor S with S[i, j] = cos<x_i, c_j>; gradients flow
    into ``concepts`` (and ``x`` when it is a tracked tensor). Zero-norm rows
    are epsilon-guarded (similarity 0) and surface a warning.

    ``assume_normalized_x=True`` skips re-normalizing ``x`` when the caller
    already holds unit rows (cached per image during training).
    """
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    concepts = concepts if isinstance(concepts, ad.Tensor) else ad.Tensor(concepts)
    if x.ndim != 2 or concepts.ndim != 2 or x.shape[1] != concepts.shape[1]:
        raise ad.ShapeError(f"soft_assign: {x.shape} vs {concepts.shape}")
    for name, t in (("pixel", x), ("concept", concepts)):
        norms = np.sqrt((t.data * t.data).sum(axis=1))
        if np.any(norms == 0.0):
            warnings.warn(f"zero-norm {name} row(s); cosine guarded to 0", RuntimeWarning)
    xn = x if assume_normalized_x else ad.l2_normalize_rows(x, eps=COSINE_EPS)
    cn = ad.l2_normalize_rows(concepts, eps=COSINE_EPS)
    return ad.matmul(xn, ad.transpose(cn))


def hard_assign(soft):
    """Per-pixel argmax over concepts; ties break to the lowest index.

    Returns (labels, active_concepts) where active_concepts drops every
    concept that no pixel selected.
    """
    s = soft.data if isinstance(soft, ad.Tensor) else np.asarray(soft)
    if not np.all(np.isfinite(s)):
        raise ValueError("hard_assign: non-finite similarities")
    labels = s.argmax(axis=1)
    return labels, tuple(sorted(np.unique(labels).tolist()))


def upsample_soft(soft_grid, out_h, out_w):
    """Bilinearly upsample a soft assignment grid (h, w, k) to (H, W, k).

    align_corners=False convention (see autodiff.bilinear_resize for the
    exact sampling formula). The hard assignment is taken *after* this
    restoration at inference time.
    """
    arr = soft_grid.data if isinstance(soft_grid, ad.Tensor) else np.asarray(soft_grid)
    if arr.ndim != 3:
        raise ad.ShapeError(f"upsample_soft expects (h, w, k), got {arr.shape}")
    h, w = arr.shape[:2]
    if out_h < h or out_w < w:
        raise ad.ShapeError(f"invalid target extents {out_h}x{out_w} for source {h}x{w}")
    out = ad.bilinear_resize(soft_grid if isinstance(soft_grid, ad.Tensor) else ad.Tensor(arr),
                             out_h, out_w)
    return out if isinstance(soft_grid, ad.Tensor) else out.data


def assign(x, concepts, grid_hw=None, target_hw=None):
    """Full inference-time assignment path.

    soft cosine -> optional bilinear upsample (requires ``grid_hw``) ->
    hard labels. Returns an AssignmentMatrix over the final resolution.
    """
    with ad.no_grad():
        s = soft_assign(x, concepts).data
    if target_hw is not None:
        if grid_hw is None:
            raise ValueError("target_hw given without grid_hw")
        h, w = grid_hw
        s = upsample_soft(s.reshape(h, w, -1), *target_hw).reshape(-1, s.shape[1])
    return AssignmentMatrix(s)
