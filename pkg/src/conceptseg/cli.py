"""Command-line interface.

Subcommands: synth, train, infer, baseline, eval, classify-kmeans,
classify-knn, classify-text, sweep-prototypes. Every run writes a
``run_config.json`` snapshot (command, flags, seeds, package version) next
to its outputs; re-running the recorded argv in deterministic mode (fixed
seeds, single-threaded BLAS) reproduces the outputs bit-identically.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import METHODS, BaselineConfig, cluster_image, throughput_harness
from .classifier import (
    average_region_embeddings,
    foreground_scores,
    kmeans_classify,
    knn_classify,
    regions_from_labels,
    split_background,
    text_classify,
)
from .concept_generator import load_checkpoint, save_checkpoint
from .dataio import (
    FeatureMap,
    load_dataset,
    read_feature_file,
    read_manifest,
    save_label_map,
    write_feature_file,
    write_manifest,
)
from .evaluation import evaluate_clusters, hungarian_matched_accuracy, miou
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainConfig, infer, infer_many, train, write_loss_csv


_current_argv = None


def _write_snapshot(out_dir, command, flags):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "command": command,
        "argv": list(_current_argv) if _current_argv is not None else sys.argv[1:],
        "flags": {k: v for k, v in sorted(flags.items()) if k != "func"},
        "version": __version__,
    }
    (out_dir / "run_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True,
                                                        default=str) + "\n")


def _parse_range(text):
    if ".." in text:
        lo, hi = text.split("..", 1)
        return int(lo), int(hi)
    v = int(text)
    return v, v


def cmd_synth(args):
    lo, hi = _parse_range(args.clusters)
    spec = SyntheticSpec(clusters_min=lo, clusters_max=hi, dim=args.dim,
                         grid=args.grid, noise_std=args.noise,
                         max_center_cos=args.max_center_cos,
                         direction_pool=args.pool, direction_jitter=args.jitter,
                         seed=args.seed)
    maps = generate_synthetic(spec, args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rels = []
    for fm in maps:
        rel = f"{fm.image_id}.acft"
        write_feature_file(fm, out / rel)
        rels.append(rel)
    write_manifest(out / "manifest.txt", rels, meta={
        "kind": "synthetic", "spec": dataclasses.asdict(spec),
        "ignore_index": None,
    })
    _write_snapshot(out, "synth", vars(args))
    print(f"wrote {len(rels)} feature files + manifest to {out}")
    return 0


def cmd_train(args):
    maps = list(load_dataset(args.data))
    cfg = TrainConfig(learning_rate=args.lr, weight_decay=args.wd,
                      iterations=args.iters, batch_size=args.batch,
                      num_prototypes=args.k, num_steps=args.steps,
                      image_side=args.image_side, seed=args.seed,
                      include_diagonal=not args.no_diagonal,
                      batch_reduction=args.batch_reduction,
                      decay_all=args.decay_all)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(maps, cfg)
    save_checkpoint(result.params, out / "checkpoint.ackp")
    write_loss_csv(result.loss_history, out / "loss.csv")
    summary = {
        "final_loss": result.loss_history[-1],
        "mean_last_50": float(np.mean(result.loss_history[-50:])),
        "iterations": cfg.iterations,
        "skipped_images": result.skipped_images,
        "seconds": result.seconds,
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_snapshot(out, "train", vars(args))
    print(f"trained {cfg.iterations} iterations; final loss {result.loss_history[-1]:.6f}; "
          f"checkpoint at {out / 'checkpoint.ackp'}")
    return 0


def cmd_infer(args):
    params = load_checkpoint(args.checkpoint)
    maps = list(load_dataset(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, rate = infer_many(params, maps, restore_resolution=not args.no_restore)
    per_image = {}
    for fm, res in zip(maps, results):
        labels = res.assignment.hard.reshape(res.output_hw)
        save_label_map(labels, out / f"{fm.image_id}.png")
        per_image[fm.image_id] = {
            "active_concepts": list(res.assignment.active_concepts),
            "num_regions": res.assignment.num_regions,
        }
    (out / "inference.json").write_text(json.dumps({
        "images_per_second": rate, "per_image": per_image}, indent=2, sort_keys=True) + "\n")
    _write_snapshot(out, "infer", vars(args))
    print(f"{len(maps)} images at {rate:.1f} images/s -> {out}")
    return 0


def cmd_baseline(args):
    cfg = BaselineConfig(method=args.method, n_clusters=args.k,
                         n_components=args.n_components, damping=args.damping,
                         preference=args.preference,
                         distance_threshold=args.distance_threshold,
                         linkage=args.linkage, seed=args.seed)
    maps = list(load_dataset(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for fm in maps:
        labels = cluster_image(fm.features, cfg).reshape(fm.grid_h, fm.grid_w)
        save_label_map(labels, out / f"{fm.image_id}.png")
    rate = len(maps) / max(time.perf_counter() - t0, 1e-9)
    report = {"method": args.method, "images_per_second": rate}
    if args.throughput_all:
        report["throughput"] = throughput_harness(
            maps, [BaselineConfig(method=m, seed=args.seed) for m in METHODS])
    (out / "baseline.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_snapshot(out, "baseline", vars(args))
    print(f"{args.method}: {len(maps)} images at {rate:.2f} images/s -> {out}")
    return 0


def _load_gt(args):
    """Ground-truth masks keyed by image id, from a manifest of feature files."""
    gt = {}
    ignore = None
    meta, _ = read_manifest(args.gt)
    ignore = meta.get("ignore_index")
    for fm in load_dataset(args.gt):
        if fm.labels is not None:
            gt[fm.image_id] = fm.labels
    return gt, ignore


def cmd_eval(args):
    from .dataio import load_label_map

    gt, ignore = _load_gt(args)
    pred_dir = Path(args.pred)
    preds, gts = [], []
    missing = []
    for image_id, gt_mask in sorted(gt.items()):
        p = pred_dir / f"{image_id}.png"
        if not p.exists():
            missing.append(image_id)
            continue
        pred = load_label_map(p)
        if pred.shape != gt_mask.shape:
            raise SystemExit(f"{image_id}: prediction {pred.shape} vs gt {gt_mask.shape}")
        preds.append(pred.reshape(-1))
        gts.append(gt_mask.reshape(-1))
    if not preds:
        raise SystemExit("no overlapping predictions/ground truth found")
    pred_all = np.concatenate(preds)
    gt_all = np.concatenate(gts)
    if args.matched:
        report, mapping = evaluate_clusters(pred_all, gt_all, ignore_index=ignore)
    else:
        report = miou(pred_all, gt_all, ignore_index=ignore)
        mapping = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"miou": report.mean_iou, "pixel_accuracy": report.pixel_accuracy,
               "evaluated_pixels": report.evaluated_pixels,
               "per_class_iou": report.as_dict()["per_class_iou"],
               "missing_predictions": missing}
    if mapping is not None:
        payload["cluster_mapping"] = {str(k): v for k, v in mapping.items()}
    (out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out / "per_class_iou.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "iou"])
        for c, v in sorted(report.per_class_iou.items()):
            w.writerow([c, f"{v:.6f}"])
    _write_snapshot(out, "eval", vars(args))
    print(f"mIoU {report.mean_iou:.4f}  pixel accuracy {report.pixel_accuracy:.4f}")
    return 0


def _regions_for_classification(params, fm, restore):
    res = infer(params, fm, restore_resolution=restore)
    labels = res.assignment.hard
    active = list(res.assignment.active_concepts)
    return res, labels, active


def _background_split(fm, labels, active, normalize):
    """Attention-based background/foreground split at the feature grid."""
    if fm.attention is None:
        return [], active, None
    regions = {r: np.flatnonzero(labels == r) for r in active}
    scores = foreground_scores(regions, fm.attention, normalize=normalize)
    bg, fg = split_background(scores)
    return bg, fg, scores


def _classify_common(args, classify_fn):
    params = load_checkpoint(args.checkpoint)
    maps = list(load_dataset(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for fm in maps:
        res, labels, active = _regions_for_classification(params, fm, restore=False)
        bg, fg, scores = _background_split(fm, labels, active,
                                           normalize=args.normalize_scores)
        if fm.region_embeddings is not None and len(fm.region_embeddings) == len(active):
            emb = np.asarray(fm.region_embeddings, dtype=np.float64)
            emb_by_region = dict(zip(active, emb))
        else:
            emb = average_region_embeddings(fm.features, labels, active)
            emb_by_region = dict(zip(active, emb))
        outputs[fm.image_id] = {
            "fm": fm, "labels": labels, "active": active, "bg": bg, "fg": fg,
            "emb_by_region": emb_by_region, "scores": scores,
        }
    classes = classify_fn(outputs)
    per_image = {}
    for image_id, o in outputs.items():
        fm = o["fm"]
        mask = np.full(fm.num_pixels, args.background_index, dtype=np.int64)
        for r in o["active"]:
            mask[o["labels"] == r] = classes.get((image_id, r), args.background_index)
        save_label_map(mask.reshape(fm.grid_h, fm.grid_w), Path(args.out) / f"{image_id}.png")
        per_image[image_id] = {str(r): int(classes.get((image_id, r), args.background_index))
                               for r in o["active"]}
    (Path(args.out) / "classes.json").write_text(
        json.dumps(per_image, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_classify_kmeans(args):
    def classify(outputs):
        keys, embs = [], []
        fixed = {}
        for image_id, o in outputs.items():
            for r in o["bg"]:
                fixed[(image_id, r)] = args.background_index
            for r in o["fg"]:
                keys.append((image_id, r))
                embs.append(o["emb_by_region"][r])
        pred = kmeans_classify(np.stack(embs), args.classes, seed=args.seed,
                               restarts=args.restarts)
        offset = args.background_index + 1
        out = {k: pred.classes[i] + offset for i, k in enumerate(keys)}
        out.update(fixed)
        return out

    rc = _classify_common(args, classify)
    _write_snapshot(args.out, "classify-kmeans", vars(args))
    return rc


def cmd_classify_knn(args):
    bank = read_feature_file(args.bank)
    bank_emb = np.asarray(bank.region_embeddings, dtype=np.float64)
    bank_labels = np.asarray(bank.meta.get("region_classes"), dtype=np.int64)
    if bank_emb is None or bank_labels is None:
        raise SystemExit("bank file must carry region_embeddings + region_classes meta")

    def classify(outputs):
        out = {}
        for image_id, o in outputs.items():
            for r in o["bg"]:
                out[(image_id, r)] = args.background_index
            fg = o["fg"]
            if not fg:
                continue
            emb = np.stack([o["emb_by_region"][r] for r in fg])
            pred = knn_classify(emb, bank_emb, bank_labels, args.k)
            for i, r in enumerate(fg):
                out[(image_id, r)] = pred.classes[i]
        return out

    rc = _classify_common(args, classify)
    _write_snapshot(args.out, "classify-knn", vars(args))
    return rc


def cmd_classify_text(args):
    cls_file = read_feature_file(args.class_embeddings)
    class_emb = np.asarray(cls_file.region_embeddings, dtype=np.float64)

    def classify(outputs):
        out = {}
        for image_id, o in outputs.items():
            for r in o["bg"]:
                out[(image_id, r)] = args.background_index
            fg = o["fg"]
            if not fg:
                continue
            emb = np.stack([o["emb_by_region"][r] for r in fg])
            pred = text_classify(emb, class_emb)
            offset = args.background_index + 1
            for i, r in enumerate(fg):
                out[(image_id, r)] = pred.classes[i] + offset
        return out

    rc = _classify_common(args, classify)
    _write_snapshot(args.out, "classify-text", vars(args))
    return rc


def cmd_sweep(args):
    ks = [int(v) for v in args.k_values.split(",")]
    train_maps = list(load_dataset(args.data))
    val_maps = list(load_dataset(args.val)) if args.val else train_maps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in ks:
        cfg = TrainConfig(learning_rate=args.lr, weight_decay=args.wd,
                          iterations=args.iters, batch_size=args.batch,
                          num_prototypes=k, num_steps=args.steps, seed=args.seed)
        result = train(train_maps, cfg)
        accs, count_ok = [], 0
        for fm in val_maps:
            if fm.labels is None:
                continue
            res = infer(result.params, fm)
            accs.append(hungarian_matched_accuracy(res.assignment.hard, fm.label_vector()))
            count_ok += len(res.assignment.active_concepts) == fm.meta.get("num_clusters")
        rows.append({"k": k, "matched_accuracy": float(np.mean(accs)),
                     "count_agreement": count_ok / max(len(accs), 1),
                     "final_loss": result.loss_history[-1]})
        save_checkpoint(result.params, out / f"checkpoint_k{k}.ackp")
        print(f"k={k}: matched accuracy {rows[-1]['matched_accuracy']:.4f}, "
              f"count agreement {rows[-1]['count_agreement']:.3f}")
    (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "matched_accuracy", "count_agreement", "final_loss"])
        for r in rows:
            w.writerow([r["k"], f"{r['matched_accuracy']:.6f}",
                        f"{r['count_agreement']:.6f}", f"{r['final_loss']:.6f}"])
    _write_snapshot(out, "sweep-prototypes", vars(args))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="conceptseg",
                                description="adaptive concept discovery pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic feature dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--images", type=int, default=64)
    s.add_argument("--clusters", default="2..4", help="count or lo..hi range")
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--grid", type=int, default=12)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--max-center-cos", type=float, default=0.1)
    s.add_argument("--pool", type=int, default=8,
                   help="shared direction pool size (0 = fresh directions per image)")
    s.add_argument("--jitter", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the concept generator")
    t.add_argument("--data", required=True, help="manifest path")
    t.add_argument("--out", required=True)
    t.add_argument("--k", type=int, default=5)
    t.add_argument("--steps", type=int, default=6)
    t.add_argument("--iters", type=int, default=2500)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--wd", type=float, default=0.01)
    t.add_argument("--image-side", type=int, default=224)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-diagonal", action="store_true",
                   help="exclude i=j terms from the loss (ablation)")
    t.add_argument("--batch-reduction", choices=["mean", "sum"], default="mean")
    t.add_argument("--decay-all", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment images with a trained checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--no-restore", action="store_true",
                   help="skip bilinear restoration to the original size")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("baseline", help="classical clustering baselines")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--method", choices=METHODS, default="kmeans")
    b.add_argument("--k", type=int, default=5)
    b.add_argument("--n-components", type=int, default=5)
    b.add_argument("--damping", type=float, default=0.5)
    b.add_argument("--preference", type=float, default=-2.0)
    b.add_argument("--distance-threshold", type=float, default=0.65)
    b.add_argument("--linkage", default="average")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--throughput-all", action="store_true")
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="score predicted label maps against ground truth")
    e.add_argument("--pred", required=True, help="directory of <image_id>.png")
    e.add_argument("--gt", required=True, help="manifest with labeled feature files")
    e.add_argument("--out", required=True)
    e.add_argument("--matched", action="store_true",
                   help="Hungarian-match predicted clusters onto classes first")
    e.set_defaults(func=cmd_eval)

    def classify_common_flags(c):
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--background-index", type=int, default=0)
        c.add_argument("--normalize-scores", action="store_true")
        c.add_argument("--seed", type=int, default=0)

    ck = sub.add_parser("classify-kmeans", help="k-means pseudo-class concepts")
    classify_common_flags(ck)
    ck.add_argument("--classes", type=int, default=20)
    ck.add_argument("--restarts", type=int, default=10)
    ck.set_defaults(func=cmd_classify_kmeans)

    cn = sub.add_parser("classify-knn", help="weighted k-NN against a labeled bank")
    classify_common_flags(cn)
    cn.add_argument("--bank", required=True,
                    help="feature file with region_embeddings + region_classes meta")
    cn.add_argument("--k", type=int, default=5)
    cn.set_defaults(func=cmd_classify_knn)

    ct = sub.add_parser("classify-text", help="nearest text-derived class embedding")
    classify_common_flags(ct)
    ct.add_argument("--class-embeddings", required=True,
                    help="feature file whose region_embeddings section holds one row per class")
    ct.set_defaults(func=cmd_classify_text)

    sw = sub.add_parser("sweep-prototypes", help="train across prototype counts")
    sw.add_argument("--data", required=True)
    sw.add_argument("--val", default=None)
    sw.add_argument("--out", required=True)
    sw.add_argument("--k-values", default="2,5,7,10,15")
    sw.add_argument("--steps", type=int, default=6)
    sw.add_argument("--iters", type=int, default=2500)
    sw.add_argument("--batch", type=int, default=32)
    sw.add_argument("--lr", type=float, default=1e-4)
    sw.add_argument("--wd", type=float, default=0.01)
    sw.add_argument("--seed", type=int, default=0)
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    global _current_argv
    parser = build_parser()
    args = parser.parse_args(argv)
    _current_argv = list(argv) if argv is not None else sys.argv[1:]
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
