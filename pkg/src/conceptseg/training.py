"""Training loop for the concept generator.

Adam with decoupled weight decay (beta = (0.9, 0.999), eps = 1e-8, bias
correction, decay applied directly to the weights scaled by the learning
rate), constant learning rate, per-epoch shuffling with the config seed.
Affinity graphs live on fixed pixel embeddings, so per-image modularity
weights are precomputed once and cached. Single-threaded execution with a
fixed seed is bitwise reproducible.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .assignment import AssignmentMatrix, soft_assign, upsample_soft
from .concept_generator import (
    ConceptSet,
    GeneratorConfig,
    GeneratorParams,
    generator_forward,
    init_params,
)
from .modularity import build_affinity, modularity_loss, modularity_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    iterations: int = 2500
    batch_size: int = 32
    num_prototypes: int = 5
    num_steps: int = 6
    image_side: int = 224
    seed: int = 0
    # loss variant flags
    include_diagonal: bool = True
    batch_reduction: str = "mean"     # "mean" | "sum"
    decay_all: bool = False           # decay layer-norm affine + prototypes too

    def __post_init__(self):
        if min(self.learning_rate, self.iterations, self.batch_size,
               self.num_prototypes, self.num_steps, self.image_side) <= 0:
            raise ValueError("all training hyperparameters must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown batch_reduction {self.batch_reduction!r}")


class AdamW:
    """Decoupled-weight-decay Adam over named parameter tensors."""

    def __init__(self, named_params, lr, weight_decay=0.0, decay_names=(),
                 betas=(0.9, 0.999), eps=1e-8):
        self.named = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.decay_names = set(decay_names)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def zero_grad(self):
        for _, p in self.named:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.named:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and name in self.decay_names:
                p.data -= self.lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class ImageCache:
    image_id: str
    pixels: np.ndarray        # raw features, as provided
    pixels_unit: np.ndarray   # row-normalized copy for cosine assignment
    graph: object
    mod_weights: np.ndarray = None  # cached modularity_weights(graph)


@dataclass
class TrainResult:
    params: GeneratorParams
    loss_history: list
    skipped_images: int
    seconds: float
    config: TrainConfig


def _prepare_cache(dataset, cfg):
    cache = []
    skipped = 0
    dim = None
    for fmap in dataset:
        x = np.asarray(fmap.features, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite features in image {fmap.image_id}")
        if dim is None:
            dim = x.shape[1]
        elif x.shape[1] != dim:
            raise ValueError(
                f"feature dim mismatch: {fmap.image_id} has {x.shape[1]}, expected {dim}")
        try:
            graph = build_affinity(x)
        except ValueError:
            skipped += 1
            log.warning("skipping image %s: degenerate affinity graph", fmap.image_id)
            continue
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        cache.append(ImageCache(
            image_id=fmap.image_id,
            pixels=x,
            pixels_unit=x / np.where(norms > 0, norms, 1.0),
            graph=graph,
            mod_weights=modularity_weights(graph),
        ))
    if not cache:
        raise ValueError("dataset is empty (or every image was degenerate)")
    return cache, skipped, dim


def batch_loss(params, images, cfg):
    """Mean (or sum) of per-image modularity losses on one tape."""
    total = None
    for img in images:
        concepts = generator_forward(img.pixels, params)
        s = soft_assign(ad.Tensor(img.pixels_unit), concepts, assume_normalized_x=True)
        li = modularity_loss(img.graph, s, include_diagonal=cfg.include_diagonal,
                             weights=img.mod_weights)
        total = li if total is None else total + li
    if cfg.batch_reduction == "mean":
        total = total * (1.0 / len(images))
    return total


def train(dataset, cfg, params=None, progress=None):
    """Optimize generator parameters on a stream of feature maps.

    Returns a TrainResult with the per-iteration loss history. Training is
    deterministic for a fixed seed in single-threaded mode. A non-finite
    loss aborts with a diagnostic; degenerate images (zero total edge
    weight) are skipped up front and counted.
    """
    cache, skipped, dim = _prepare_cache(dataset, cfg)
    if params is None:
        gen_cfg = GeneratorConfig(
            num_prototypes=cfg.num_prototypes,
            embed_dim=dim,
            num_steps=cfg.num_steps,
            init_seed=cfg.seed,
        )
        params = init_params(gen_cfg)
    elif params.config.embed_dim != dim:
        raise ValueError(
            f"checkpoint embed_dim {params.config.embed_dim} vs dataset dim {dim}")

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(params.named_tensors(), lr=cfg.learning_rate,
                weight_decay=cfg.weight_decay,
                decay_names=(dict(params.named_tensors()).keys()
                             if cfg.decay_all else params.decayable_names()))
    history = []
    order = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        while len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(cache)).tolist())
        batch_idx = [order.pop(0) for _ in range(cfg.batch_size)]
        batch = [cache[i] for i in batch_idx]
        opt.zero_grad()
        with ad.GradTape() as tape:
            loss = batch_loss(params, batch, cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(
                f"non-finite loss {value} at iteration {it} "
                f"(batch {[b.image_id for b in batch]})")
        tape.backward(loss)
        opt.step()
        history.append(value)
        if progress is not None:
            progress(it, value)
    return TrainResult(params=params, loss_history=history, skipped_images=skipped,
                       seconds=time.perf_counter() - t0, config=cfg)


def write_loss_csv(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        for i, v in enumerate(history):
            writer.writerow([i, f"{v:.17g}"])


@dataclass
class InferenceResult:
    concept_set: ConceptSet
    assignment: AssignmentMatrix
    grid_hw: tuple
    output_hw: tuple


def infer(params, fmap, restore_resolution=True):
    """Inference path: concepts -> soft cosine assignment -> bilinear
    restoration to the original resolution -> hard labels."""
    x = np.asarray(fmap.features, dtype=np.float64)
    with ad.no_grad():
        concepts = generator_forward(x, params).data
        s = soft_assign(x, concepts).data
    h, w = fmap.grid_h, fmap.grid_w
    out_hw = (h, w)
    if restore_resolution and fmap.original_size is not None:
        out_hw = tuple(fmap.original_size)
        s = upsample_soft(s.reshape(h, w, -1), *out_hw).reshape(-1, s.shape[1])
    return InferenceResult(
        concept_set=ConceptSet(concepts=concepts, image_id=fmap.image_id),
        assignment=AssignmentMatrix(s),
        grid_hw=(h, w),
        output_hw=out_hw,
    )


def infer_many(params, fmaps, restore_resolution=True):
    """Batched inference; returns (results, images_per_second)."""
    t0 = time.perf_counter()
    results = [infer(params, fm, restore_resolution) for fm in fmaps]
    dt = time.perf_counter() - t0
    return results, (len(results) / dt if dt > 0 else float("inf"))


def config_dict(cfg):
    return asdict(cfg)
