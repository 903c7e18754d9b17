"""Attention-updated concept generator.

A bank of k learnable prototype embeddings is mapped to per-image concepts
by N update steps. Each step applies, in order: cross-attention (prototypes
query the image's pixel embeddings), self-attention among the prototypes,
and a feed-forward network, every sublayer wrapped with a residual
connection followed by layer normalization (post-norm). Pixel embeddings
are consumed as provided; they are never modified.

Conventions (recorded design choices, not externally fixed):
  - multi-head attention with head count d // 64 (min 1), per-head scaling
    1/sqrt(d_head); with one head this is exactly softmax(Q K^T / sqrt(d)) V
  - FFN expansion 4x with clamp-at-zero nonlinearity, no bias terms anywhere
  - per-step parameters are NOT shared across the N steps
  - prototypes and projections init N(0, 0.02^2); layer-norm affine at identity
"""
from __future__ import annotations

import io
import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class GeneratorConfig:
    num_prototypes: int = 5
    embed_dim: int = 384
    num_steps: int = 6
    num_heads: int = 0          # 0 -> derived as max(1, embed_dim // 64)
    ffn_expansion: int = 4
    init_seed: int = 0

    def __post_init__(self):
        if self.num_prototypes < 2:
            raise ValueError("num_prototypes must be >= 2")
        if self.num_steps < 0:
            raise ValueError("num_steps must be >= 0")
        heads = self.heads
        if self.embed_dim % heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {heads} heads")

    @property
    def heads(self):
        return self.num_heads if self.num_heads > 0 else max(1, self.embed_dim // 64)


@dataclass
class AttentionParams:
    wq: ad.Tensor
    wk: ad.Tensor
    wv: ad.Tensor
    wo: ad.Tensor


@dataclass
class StepParams:
    cross: AttentionParams
    self_attn: AttentionParams
    ffn_w1: ad.Tensor
    ffn_w2: ad.Tensor
    ln_cross_gamma: ad.Tensor
    ln_cross_beta: ad.Tensor
    ln_self_gamma: ad.Tensor
    ln_self_beta: ad.Tensor
    ln_ffn_gamma: ad.Tensor
    ln_ffn_beta: ad.Tensor


@dataclass
class GeneratorParams:
    config: GeneratorConfig
    prototypes: ad.Tensor                     # (k, d) shared across images
    steps: list = field(default_factory=list)

    def named_tensors(self):
        """Deterministically ordered (name, tensor) pairs of every leaf."""
        out = [("prototypes", self.prototypes)]
        for i, s in enumerate(self.steps):
            for kind, attn in (("cross", s.cross), ("self", s.self_attn)):
                for pname in ("wq", "wk", "wv", "wo"):
                    out.append((f"step{i}.{kind}.{pname}", getattr(attn, pname)))
            out.append((f"step{i}.ffn_w1", s.ffn_w1))
            out.append((f"step{i}.ffn_w2", s.ffn_w2))
            for ln in ("ln_cross", "ln_self", "ln_ffn"):
                out.append((f"step{i}.{ln}_gamma", getattr(s, ln + "_gamma")))
                out.append((f"step{i}.{ln}_beta", getattr(s, ln + "_beta")))
        return out

    def decayable_names(self):
        """Projection/FFN weights: the tensors weight decay applies to."""
        return {n for n, _ in self.named_tensors()
                if ".w" in n and not n.startswith("prototypes")}


@dataclass
class ConceptSet:
    """Per-image concepts (k x d) plus a provenance link to the source."""

    concepts: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.concepts)):
            raise ValueError("non-finite concept rows")


def init_params(config):
    rng = np.random.default_rng(config.init_seed)
    d = config.embed_dim
    hidden = config.ffn_expansion * d

    def w(shape):
        return ad.Tensor(rng.normal(scale=0.02, size=shape), requires_grad=True)

    def ln_pair():
        return (ad.Tensor(np.ones(d), requires_grad=True),
                ad.Tensor(np.zeros(d), requires_grad=True))

    steps = []
    for _ in range(config.num_steps):
        g1, b1 = ln_pair()
        g2, b2 = ln_pair()
        g3, b3 = ln_pair()
        steps.append(StepParams(
            cross=AttentionParams(w((d, d)), w((d, d)), w((d, d)), w((d, d))),
            self_attn=AttentionParams(w((d, d)), w((d, d)), w((d, d)), w((d, d))),
            ffn_w1=w((d, hidden)),
            ffn_w2=w((hidden, d)),
            ln_cross_gamma=g1, ln_cross_beta=b1,
            ln_self_gamma=g2, ln_self_beta=b2,
            ln_ffn_gamma=g3, ln_ffn_beta=b3,
        ))
    return GeneratorParams(config=config,
                           prototypes=w((config.num_prototypes, d)),
                           steps=steps)


def _head_selectors(d, heads, dtype):
    dh = d // heads
    sel = []
    for h in range(heads):
        e = np.zeros((d, dh), dtype=dtype)
        e[h * dh: (h + 1) * dh] = np.eye(dh, dtype=dtype)
        sel.append(ad.Tensor(e))
    return sel


def _multi_head_update(query, keyval, attn, heads):
    """softmax(Q K^T / sqrt(d_head)) V per head, concatenated, then W_o."""
    q = ad.matmul(query, attn.wq)
    k = ad.matmul(keyval, attn.wk)
    v = ad.matmul(keyval, attn.wv)
    d = q.shape[1]
    if heads == 1:
        weights = ad.softmax_rows(ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(d)))
        mixed = ad.matmul(weights, v)
    else:
        mixed = None
        scale = 1.0 / math.sqrt(d // heads)
        for e in _head_selectors(d, heads, q.data.dtype):
            qh, kh, vh = ad.matmul(q, e), ad.matmul(k, e), ad.matmul(v, e)
            wh = ad.softmax_rows(ad.matmul(qh, ad.transpose(kh)) * scale)
            part = ad.matmul(ad.matmul(wh, vh), ad.transpose(e))
            mixed = part if mixed is None else ad.add(mixed, part)
    return ad.matmul(mixed, attn.wo)


def cross_attention_step(concepts, pixels, attn, heads=1):
    """C + MHA(C as query, X as key/value) W_o; the following layer norm is
    applied by the caller between sublayers."""
    pixels = pixels if isinstance(pixels, ad.Tensor) else ad.Tensor(pixels)
    if concepts.shape[1] != pixels.shape[1]:
        raise ad.ShapeError(f"cross_attention_step: {concepts.shape} vs {pixels.shape}")
    return ad.add(concepts, _multi_head_update(concepts, pixels, attn, heads))


def self_attention_step(concepts, attn, heads=1):
    """C + MHA(C as query, key, and value) W_o."""
    return ad.add(concepts, _multi_head_update(concepts, concepts, attn, heads))


def _ffn_step(concepts, step):
    hidden = ad.relu(ad.matmul(concepts, step.ffn_w1))
    return ad.add(concepts, ad.matmul(hidden, step.ffn_w2))


def _post_norm(x, gamma, beta):
    return ad.layer_norm_affine(x, gamma, beta)


def generator_forward(pixels, params):
    """Run all update steps and return the per-image concept tensor (k x d).

    Each step: post-norm(cross-attention) -> post-norm(self-attention) ->
    post-norm(FFN). A zero-step configuration returns the prototypes
    unchanged. Returns an autodiff tensor; wrap in no_grad() for inference.
    """
    pixels = pixels if isinstance(pixels, ad.Tensor) else ad.Tensor(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != params.config.embed_dim:
        raise ad.ShapeError(
            f"pixel matrix {pixels.shape} vs embed_dim {params.config.embed_dim}")
    heads = params.config.heads
    c = params.prototypes
    for step in params.steps:
        c = _post_norm(cross_attention_step(c, pixels, step.cross, heads),
                       step.ln_cross_gamma, step.ln_cross_beta)
        c = _post_norm(self_attention_step(c, step.self_attn, heads),
                       step.ln_self_gamma, step.ln_self_beta)
        c = _post_norm(_ffn_step(c, step), step.ln_ffn_gamma, step.ln_ffn_beta)
    return c


def generate_concepts(pixels, params, image_id=""):
    """Inference wrapper returning a plain ConceptSet."""
    with ad.no_grad():
        c = generator_forward(pixels, params)
    return ConceptSet(concepts=c.data.copy(), image_id=image_id)


# -- checkpoint container -------------------------------------------------------
#
# Layout (little-endian): magic "ACKP" | u16 version | u32 meta_len |
# meta JSON (config dict) | u32 entry count | per entry: u16 name_len, name,
# u8 ndim, u32 dims..., then float64 payloads in entry order | u32 crc32 of
# all payload bytes.

CHECKPOINT_MAGIC = b"ACKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(params, path):
    names = params.named_tensors()
    meta = json.dumps({
        "num_prototypes": params.config.num_prototypes,
        "embed_dim": params.config.embed_dim,
        "num_steps": params.config.num_steps,
        "num_heads": params.config.num_heads,
        "ffn_expansion": params.config.ffn_expansion,
        "init_seed": params.config.init_seed,
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(CHECKPOINT_VERSION.to_bytes(2, "little"))
    buf.write(len(meta).to_bytes(4, "little"))
    buf.write(meta)
    buf.write(len(names).to_bytes(4, "little"))
    payload = io.BytesIO()
    for name, t in names:
        nb = name.encode()
        buf.write(len(nb).to_bytes(2, "little"))
        buf.write(nb)
        buf.write(t.ndim.to_bytes(1, "little"))
        for dim in t.shape:
            buf.write(int(dim).to_bytes(4, "little"))
        payload.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    pb = payload.getvalue()
    buf.write(pb)
    buf.write(zlib.crc32(pb).to_bytes(4, "little"))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {bytes(view[:4])!r}")
    version = int.from_bytes(view[4:6], "little")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 6
    meta_len = int.from_bytes(view[off:off + 4], "little"); off += 4
    meta = json.loads(bytes(view[off:off + meta_len])); off += meta_len
    count = int.from_bytes(view[off:off + 4], "little"); off += 4
    entries = []
    for _ in range(count):
        nlen = int.from_bytes(view[off:off + 2], "little"); off += 2
        name = bytes(view[off:off + nlen]).decode(); off += nlen
        ndim = view[off]; off += 1
        shape = []
        for _ in range(ndim):
            shape.append(int.from_bytes(view[off:off + 4], "little")); off += 4
        entries.append((name, tuple(shape)))
    payload_len = sum(int(np.prod(s)) * 8 for _, s in entries)
    if off + payload_len + 4 > len(raw):
        raise ValueError("truncated checkpoint payload")
    crc = zlib.crc32(view[off:off + payload_len])
    stored = int.from_bytes(view[off + payload_len:off + payload_len + 4], "little")
    if crc != stored:
        raise ValueError("checkpoint payload checksum mismatch")

    config = GeneratorConfig(**meta)
    params = init_params(config)
    by_name = dict(params.named_tensors())
    for name, shape in entries:
        n = int(np.prod(shape))
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=off).reshape(shape)
        off += n * 8
        if name not in by_name:
            raise ValueError(f"unknown checkpoint entry {name!r}")
        if by_name[name].shape != shape:
            raise ValueError(f"shape mismatch for {name!r}: {by_name[name].shape} vs {shape}")
        by_name[name].data = arr.astype(np.float64).copy()
    return params
