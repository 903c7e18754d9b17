"""Feature-file container, dataset manifests, and label-map export.

Binary container layout (all integers little-endian):

    magic      4 bytes  b"ACFT"
    version    u16      currently 1
    dtype      u8       0 = float32 payload default
    flags      u8       reserved, 0
    meta_len   u32      followed by meta JSON (sorted keys), UTF-8
    n_sections u16
    per section:
        name_len u8, name ASCII, dtype u8 (0=f32, 1=u8, 2=i32),
        ndim u8, dims u32 x ndim, payload_len u64
    payloads, contiguous, in section-table order

Known sections: "features" (h, w, d), "attention" (heads, n),
"labels" (h, w), "region_embeddings" (r, d'). Unknown sections are skipped
on read. Feature payloads are float32 on disk and promoted to float64 in
memory; the spatial order is row-major with origin at the top-left.

A dataset manifest is line-delimited text: the first line is a JSON object
of dataset metadata (class names, ignore index, optional remap table), each
following non-empty line is a feature-file path relative to the manifest.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ACFT"
VERSION = 1

_DTYPE_CODES = {0: "<f4", 1: "u1", 2: "<i4"}
_DTYPE_FOR = {"features": 0, "attention": 0, "labels": 2, "region_embeddings": 0}


class FeatureFileError(ValueError):
    """Malformed feature container (bad magic, truncation, bad version)."""


@dataclass
class FeatureMap:
    """Per-image grid of pixel-level embeddings plus optional extras."""

    image_id: str
    grid_h: int
    grid_w: int
    dim: int
    features: np.ndarray                    # (h*w, d), row-major spatial order
    attention: np.ndarray | None = None     # (heads, n) cls->patch attention
    labels: np.ndarray | None = None        # (h, w) int ground truth
    region_embeddings: np.ndarray | None = None
    original_size: tuple | None = None      # (H, W) source image extent
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.grid_h * self.grid_w
        if self.features.shape != (n, self.dim):
            raise ValueError(
                f"features {self.features.shape} inconsistent with "
                f"{self.grid_h}x{self.grid_w} grid of dim {self.dim}")
        if self.attention is not None:
            self.attention = np.asarray(self.attention, dtype=np.float64)
            if self.attention.ndim != 2 or self.attention.shape[1] != n:
                raise ValueError(f"attention shape {self.attention.shape} vs n={n}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.grid_h, self.grid_w) and (
                    self.original_size is None or self.labels.shape != tuple(self.original_size)):
                raise ValueError(f"labels shape {self.labels.shape}")

    @property
    def num_pixels(self):
        return self.grid_h * self.grid_w

    def label_vector(self):
        return None if self.labels is None else self.labels.reshape(-1)


def write_feature_file(fmap, path):
    """Serialize a FeatureMap; the write->read round trip is bit-identical."""
    meta = {
        "image_id": fmap.image_id,
        "grid": [fmap.grid_h, fmap.grid_w],
        "dim": fmap.dim,
    }
    if fmap.original_size is not None:
        meta["original_size"] = list(fmap.original_size)
    if fmap.meta:
        meta["extra"] = fmap.meta
    sections = [("features", fmap.features.reshape(fmap.grid_h, fmap.grid_w, fmap.dim))]
    if fmap.attention is not None:
        sections.append(("attention", fmap.attention))
    if fmap.labels is not None:
        sections.append(("labels", fmap.labels))
    if fmap.region_embeddings is not None:
        sections.append(("region_embeddings", fmap.region_embeddings))

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HBB", VERSION, 0, 0))
    mb = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    buf.write(struct.pack("<H", len(sections)))
    payloads = []
    for name, arr in sections:
        code = _DTYPE_FOR[name]
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
        nb = name.encode("ascii")
        buf.write(struct.pack("<B", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(struct.pack("<Q", len(raw)))
        payloads.append(raw)
    for raw in payloads:
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def _parse_header(raw, path):
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {raw[:4]!r}")
    version, _, _ = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    off = 8
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + meta_len > len(raw):
        raise FeatureFileError(f"{path}: truncated meta block")
    meta = json.loads(raw[off:off + meta_len])
    off += meta_len
    (n_sections,) = struct.unpack_from("<H", raw, off)
    off += 2
    table = []
    for _ in range(n_sections):
        if off >= len(raw):
            raise FeatureFileError(f"{path}: truncated section table")
        nlen = raw[off]
        off += 1
        name = raw[off:off + nlen].decode("ascii")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        (plen,) = struct.unpack_from("<Q", raw, off)
        off += 8
        table.append((name, code, tuple(shape), plen))
    return meta, table, off


def read_feature_file(path):
    raw = Path(path).read_bytes()
    meta, table, off = _parse_header(raw, path)
    arrays = {}
    for name, code, shape, plen in table:
        if off + plen > len(raw):
            raise FeatureFileError(f"{path}: truncated payload for section {name!r}")
        if code in _DTYPE_CODES:
            arr = np.frombuffer(raw, dtype=_DTYPE_CODES[code], count=int(np.prod(shape)),
                                offset=off).reshape(shape)
            known = name in _DTYPE_FOR
            if known:
                arrays[name] = arr
        off += plen
    if "features" not in arrays:
        raise FeatureFileError(f"{path}: missing features section")
    h, w = meta["grid"]
    d = meta["dim"]
    feats = arrays["features"]
    if feats.shape != (h, w, d):
        raise FeatureFileError(f"{path}: feature shape {feats.shape} vs header {h}x{w}x{d}")
    return FeatureMap(
        image_id=meta["image_id"],
        grid_h=h, grid_w=w, dim=d,
        features=feats.reshape(h * w, d),
        attention=arrays.get("attention"),
        labels=arrays.get("labels"),
        region_embeddings=arrays.get("region_embeddings"),
        original_size=tuple(meta["original_size"]) if "original_size" in meta else None,
        meta=meta.get("extra", {}),
    )


def read_header(path):
    """Meta dict and section table without loading payloads (streaming use)."""
    with open(path, "rb") as f:
        head = f.read(65536)
    meta, table, _ = _parse_header(head, path)
    return meta, [(name, shape, plen) for name, _, shape, plen in table]


# -- manifests --------------------------------------------------------------------

def write_manifest(path, file_paths, meta=None):
    path = Path(path)
    lines = [json.dumps(meta or {}, sort_keys=True)]
    lines += [str(p) for p in file_paths]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path):
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FeatureFileError(f"{path}: empty manifest")
    meta = json.loads(lines[0])
    files = [ln.strip() for ln in lines[1:] if ln.strip()]
    return meta, files


def load_dataset(manifest_path):
    """Yield FeatureMaps one at a time (the corpus is never fully resident)."""
    manifest_path = Path(manifest_path)
    _, files = read_manifest(manifest_path)
    for rel in files:
        yield read_feature_file(manifest_path.parent / rel)


# -- label-map export ---------------------------------------------------------------

def segmentation_palette(n=256):
    """Deterministic 256-entry palette (bit-reversal colormap, the common
    convention for segmentation label images)."""
    cmap = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        r = g = b = 0
        cid = i
        for j in range(8):
            r |= ((cid >> 0) & 1) << (7 - j)
            g |= ((cid >> 1) & 1) << (7 - j)
            b |= ((cid >> 2) & 1) << (7 - j)
            cid >>= 3
        cmap[i] = (r, g, b)
    return cmap


def save_label_map(labels, path):
    """Write an (H, W) integer label grid as a palettized 8-bit PNG."""
    from PIL import Image

    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in uint8 for palette export")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(segmentation_palette().reshape(-1).tolist())
    img.save(path)


def load_label_map(path):
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.int64)
