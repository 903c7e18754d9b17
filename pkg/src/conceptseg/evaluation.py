"""Evaluation: Hungarian matching of predicted clusters to ground truth,
mIoU / pixel accuracy, the clustering protocol (k restarts, mean +/- std),
and the k-NN retrieval protocol.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .classifier import knn_classify


def hungarian_match(cost, maximize=True):
    """Optimal one-to-one assignment on a (possibly rectangular) cost matrix.

    Returns (rows, cols) index arrays of the min(P, G) matched pairs that
    maximize (default) the summed cost. Backed by the Jonker-Volgenant
    solver in scipy; tests verify exact agreement with brute-force
    permutation search.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost matrix must be non-empty 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost, maximize=maximize)
    return rows, cols


def confusion_matrix(pred, gt, num_pred, num_gt, ignore_index=None):
    """Pixel counts of (predicted cluster x ground-truth class).

    Ignore-index pixels are excluded; the total equals the evaluated pixel
    count.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    keep = np.ones(len(gt), dtype=bool)
    if ignore_index is not None:
        keep &= gt != ignore_index
    keep &= pred >= 0
    idx = pred[keep] * num_gt + gt[keep]
    counts = np.bincount(idx, minlength=num_pred * num_gt)
    return counts.reshape(num_pred, num_gt)


def match_clusters(confusion):
    """Injective cluster -> class map maximizing total matched overlap."""
    rows, cols = hungarian_match(confusion, maximize=True)
    return dict(zip(rows.tolist(), cols.tolist()))


def remap_predictions(pred, mapping, fill=-1):
    """Apply a cluster->class map; unmatched clusters become ``fill``."""
    pred = np.asarray(pred)
    out = np.full(pred.shape, fill, dtype=np.int64)
    for cluster, cls in mapping.items():
        out[pred == cluster] = cls
    return out


@dataclass
class SegmentationReport:
    per_class_iou: dict
    mean_iou: float
    pixel_accuracy: float
    evaluated_pixels: int

    def as_dict(self):
        return {
            "mean_iou": self.mean_iou,
            "pixel_accuracy": self.pixel_accuracy,
            "evaluated_pixels": self.evaluated_pixels,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
        }


def miou(pred, gt, num_classes=None, ignore_index=None):
    """Per-class IoU, mean IoU, and pixel accuracy for aligned class masks.

    IoU_c = TP / (TP + FP + FN). Classes absent from both prediction and
    ground truth are excluded from the mean (avoids 0/0); mIoU and accuracy
    are reported independently (neither bounds the other in general).
    Prediction entries < 0 denote unmatched clusters: never correct, counted
    as misses for the ground-truth class.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    keep = np.ones(len(gt), dtype=bool)
    if ignore_index is not None:
        keep &= gt != ignore_index
    pred = pred[keep]
    gt = gt[keep]
    if num_classes is None:
        num_classes = int(max(pred.max(initial=-1), gt.max(initial=-1))) + 1
    per_class = {}
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (gt == c)))
        fp = int(np.sum((pred == c) & (gt != c)))
        fn = int(np.sum((pred != c) & (gt == c)))
        if tp + fp + fn == 0:
            continue
        per_class[c] = tp / (tp + fp + fn)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    acc = float(np.mean(pred == gt)) if len(gt) else 0.0
    return SegmentationReport(per_class_iou=per_class, mean_iou=mean,
                              pixel_accuracy=acc, evaluated_pixels=int(len(gt)))


def hungarian_matched_accuracy(pred, gt, ignore_index=None):
    """Pixel accuracy after optimally matching predicted clusters to
    ground-truth classes (the standard unsupervised protocol)."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    num_pred = int(pred.max()) + 1
    num_gt = int(gt.max()) + 1
    conf = confusion_matrix(pred, gt, num_pred, num_gt, ignore_index)
    total = conf.sum()
    if total == 0:
        return 0.0
    rows, cols = hungarian_match(conf, maximize=True)
    return float(conf[rows, cols].sum() / total)


def evaluate_clusters(pred, gt, ignore_index=None):
    """Hungarian-map cluster labels onto classes, then score with miou()."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    num_pred = int(pred.max()) + 1
    num_gt = int(gt.max(initial=0)) + 1
    conf = confusion_matrix(pred, gt, num_pred, num_gt, ignore_index)
    mapping = match_clusters(conf)
    remapped = remap_predictions(pred, mapping)
    return miou(remapped, gt, num_classes=num_gt, ignore_index=ignore_index), mapping


# -- dataset-level protocols ----------------------------------------------------


@dataclass
class RegionSample:
    """One image's regions for the classification protocols: per-region
    embeddings, the region-index mask that places them, and ground truth."""

    embeddings: np.ndarray        # (r, d)
    region_mask: np.ndarray       # (H, W) values in [0, r)
    gt_mask: np.ndarray           # (H, W) class indices
    region_classes: np.ndarray | None = None  # optional per-region class ids


def majority_region_labels(sample, ignore_index=None):
    """Label each region by its most overlapping ground-truth class."""
    labels = []
    for r in range(sample.embeddings.shape[0]):
        covered = sample.gt_mask[sample.region_mask == r]
        if ignore_index is not None:
            covered = covered[covered != ignore_index]
        labels.append(int(np.bincount(covered).argmax()) if covered.size else 0)
    return np.asarray(labels)


def clustering_protocol(samples, num_classes, restarts=10, seed=0,
                        ignore_index=None, class_offset=0):
    """Cluster all region embeddings into pseudo-classes, Hungarian-match to
    ground truth, and repeat ``restarts`` times: returns (mean, std, reports).

    ``class_offset`` shifts cluster ids (e.g. 1 leaves index 0 free for a
    dataset-defined background class).
    """
    from .baselines import kmeans

    all_emb = np.vstack([s.embeddings for s in samples])
    reports = []
    for r in range(restarts):
        labels, _, _ = kmeans(all_emb, num_classes, restarts=1, seed=seed + r)
        labels = labels + class_offset
        pred_pix, gt_pix = [], []
        off = 0
        for s in samples:
            per_region = labels[off:off + s.embeddings.shape[0]]
            off += s.embeddings.shape[0]
            pred = per_region[s.region_mask]
            if s.region_classes is not None:
                fixed = s.region_classes >= 0
                pred = np.where(fixed[s.region_mask], s.region_classes[s.region_mask], pred)
            pred_pix.append(pred.reshape(-1))
            gt_pix.append(s.gt_mask.reshape(-1))
        report, _ = evaluate_clusters(np.concatenate(pred_pix),
                                      np.concatenate(gt_pix), ignore_index)
        reports.append(report)
    mious = [r.mean_iou for r in reports]
    return float(np.mean(mious)), float(np.std(mious)), reports


def retrieval_protocol(bank_embeddings, bank_labels, samples, k,
                       num_classes=None, ignore_index=None):
    """Weighted k-NN labels from a bank, broadcast to masks, scored by mIoU."""
    if num_classes is None:
        num_classes = int(np.max(bank_labels)) + 1
    pred_pix, gt_pix = [], []
    for s in samples:
        pred = knn_classify(s.embeddings, bank_embeddings, bank_labels,
                            k, num_classes=num_classes)
        pred_classes = np.array([pred.classes[r] for r in range(len(s.embeddings))])
        pred_pix.append(pred_classes[s.region_mask].reshape(-1))
        gt_pix.append(s.gt_mask.reshape(-1))
    return miou(np.concatenate(pred_pix), np.concatenate(gt_pix),
                num_classes=num_classes, ignore_index=ignore_index)
