"""Reverse-mode automatic differentiation over dense numpy arrays.

Small tape-based engine covering exactly the primitive set the concept
pipeline needs: matrix product, transpose, row softmax, row layer norm,
elementwise add/multiply/clamp-at-zero, row L2 normalization, row max,
scalar scaling, broadcast add, sum/mean reductions, and bilinear resize.

A ``GradTape`` records operations in execution order; ``GradTape.backward``
replays the record in reverse (a valid reverse topological order, each node
visited once) and accumulates adjoints into every tracked leaf's ``grad``.

Values are float64 by default; pass ``dtype=np.float32`` at tensor creation
for throughput runs. Every operation checks its output for NaN/Inf and
raises ``NonFiniteError`` (disable with ``set_finite_checks(False)``).

A tape is confined to a single thread; independent tapes on different
threads may run concurrently.
"""
from __future__ import annotations

import math
import threading

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class DetachedGraphError(RuntimeError):
    """backward() was called on a tensor that was never recorded on a tape."""


_state = threading.local()
_CHECK_FINITE = True


def set_finite_checks(enabled):
    """Globally enable/disable the NaN/Inf guard on op outputs."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Context manager suppressing tape recording (inference mode)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class GradTape:
    """Ordered record of primitive operations with per-node adjoint storage."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self, "mismatched GradTape nesting"
        return False

    def _record(self, node):
        self._nodes.append(node)

    def backward(self, loss):
        """Seed d(loss)/d(loss) = 1 and push adjoints back to all leaves.

        Walks the recorded nodes in reverse creation order, which is a
        reverse topological order of the computation graph; each node is
        visited exactly once. Leaves accumulate into ``.grad``.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss._tape is not self:
            raise DetachedGraphError(
                "loss is not recorded on this tape (created outside it or under no_grad)")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        loss._adjoint = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            adj = node._adjoint
            if adj is None or node._backward is None:
                continue
            node._backward(adj)
            node._adjoint = None


def backward(loss):
    """Run the backward pass of the tape that recorded ``loss``."""
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss._tape is None:
        raise DetachedGraphError("loss has no recording tape (detached graph)")
    loss._tape.backward(loss)


class Tensor:
    """Dense array with an optional gradient-tracking flag.

    ``data`` is always a numpy array (float64 unless another dtype is
    requested). ``grad`` is populated on tracked leaves by
    ``GradTape.backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_adjoint", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype != np.float32:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._adjoint = None
        self._tape = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")

    def numpy(self):
        return self.data

    def argmax(self, axis=None):
        return self.data.argmax(axis=axis)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, delta):
        """Add ``delta`` to this node's pending adjoint (leaves use .grad)."""
        if self._backward is None:
            # tracked leaf (or constant): adjoint goes straight to .grad
            if not self.requires_grad:
                return
            if self.grad is None:
                self.grad = np.array(np.broadcast_to(delta, self.shape), dtype=self.data.dtype)
            else:
                self.grad += delta
        elif self._adjoint is None:
            # copy: callers may hand us views/shared buffers
            self._adjoint = np.array(np.broadcast_to(delta, self.shape), dtype=self.data.dtype)
        else:
            self._adjoint += delta

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __sub__(self, other):
        return add(self, multiply(other, -1.0))

    def __rsub__(self, other):
        return add(other, multiply(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method aliases for the primitive set -------------------------------

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def softmax(self):
        return softmax_rows(self)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def mean(self, axis=None):
        return mean_(self, axis=axis)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make_node(data, parents, backward_fn, opname):
    # a single reduction: any NaN/Inf in the array poisons its sum
    if _CHECK_FINITE and not math.isfinite(float(np.sum(data))):
        if np.all(np.isfinite(data)):  # astronomically large but finite values
            pass
        else:
            raise NonFiniteError(f"non-finite values produced by {opname}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._adjoint = None
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if track:
        out._parents = parents
        out._backward = backward_fn
        out._tape = tape
        tape._record(out)
    else:
        out._parents = ()
        out._backward = None
        out._tape = None
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    """Elementwise/broadcast addition."""
    a = _lift(a, like=b if isinstance(b, Tensor) else None)
    b = _lift(b, like=a)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make_node(data, (a, b), back, "add")


def multiply(a, b):
    """Elementwise/broadcast multiplication (covers scalar scaling)."""
    a = _lift(a, like=b if isinstance(b, Tensor) else None)
    b = _lift(b, like=a)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"multiply: {a.shape} vs {b.shape}") from e

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make_node(data, (a, b), back, "multiply")


def relu(a):
    """Clamp at zero: max(0, x). Subgradient 0 at the kink."""
    a = _lift(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def back(g):
        a._accumulate(g * mask)

    return _make_node(data, (a,), back, "relu")


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first operand."""
    a = _lift(a)
    b = _lift(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"maximum: {a.shape} vs {b.shape}")
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)

    def back(g):
        if a.requires_grad:
            a._accumulate(g * take_a)
        if b.requires_grad:
            b._accumulate(g * ~take_a)

    return _make_node(data, (a, b), back, "maximum")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """2-D matrix product."""
    a = _lift(a)
    b = _lift(b, like=a)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make_node(data, (a, b), back, "matmul")


def transpose(a):
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    data = a.data.T.copy()

    def back(g):
        a._accumulate(g.T)

    return _make_node(data, (a,), back, "transpose")


# -- row-structured ops ------------------------------------------------------

def softmax_rows(a):
    """Softmax along the last axis (max-shifted for stability)."""
    a = _lift(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        a._accumulate((g - inner) * data)

    return _make_node(data, (a,), back, "softmax")


LAYER_NORM_EPS = 1e-5


def layer_norm_rows(a, eps=LAYER_NORM_EPS):
    """Normalize each row to zero mean / unit variance (no affine part).

    Variance gets ``eps`` added, so a constant row maps to exact zeros.
    """
    a = _lift(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    data = xc * istd

    def back(g):
        n = a.shape[-1]
        gsum = g.sum(axis=-1, keepdims=True)
        proj = (g * data).sum(axis=-1, keepdims=True)
        a._accumulate(istd / n * (n * g - gsum - data * proj))

    return _make_node(data, (a,), back, "layer_norm")


def layer_norm_affine(a, gamma, beta, eps=LAYER_NORM_EPS):
    """Fused layer_norm_rows(a) * gamma + beta over the last axis.

    Same math as the composed form; fused because the normalize-scale-shift
    triple sits inside every model sublayer.
    """
    a = _lift(a)
    gamma = _lift(gamma, like=a)
    beta = _lift(beta, like=a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    data = xhat * gamma.data + beta.data

    def back(g):
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if a.requires_grad:
            gx = g * gamma.data
            n = a.shape[-1]
            gsum = gx.sum(axis=-1, keepdims=True)
            proj = (gx * xhat).sum(axis=-1, keepdims=True)
            a._accumulate(istd / n * (n * gx - gsum - xhat * proj))

    return _make_node(data, (a, gamma, beta), back, "layer_norm_affine")


L2_EPS = 1e-12


def l2_normalize_rows(a, eps=L2_EPS):
    """Scale each row to unit L2 norm; denominators get ``+eps``."""
    a = _lift(a)
    r = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = r + eps
    data = a.data / denom

    def back(g):
        rsafe = np.maximum(r, eps)
        dot = (g * a.data).sum(axis=-1, keepdims=True)
        a._accumulate(g / denom - a.data * (dot / (rsafe * denom * denom)))

    return _make_node(data, (a,), back, "l2_normalize")


def row_max(a):
    """Max along the last axis. Gradient flows only to the argmax element;
    ties break toward the lowest index."""
    a = _lift(a)
    idx = a.data.argmax(axis=-1)
    data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        a._accumulate(full)

    return _make_node(data, (a,), back, "row_max")


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None):
    a = _lift(a)
    data = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make_node(np.asarray(data), (a,), back, "sum")


def mean_(a, axis=None):
    a = _lift(a)
    data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.shape[axis]

    def back(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / count, a.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy())

    return _make_node(np.asarray(data), (a,), back, "mean")


# -- bilinear resize -----------------------------------------------------------

def _bilinear_coeffs(n_in, n_out):
    """align_corners=False sampling: src = (i + 0.5) * n_in / n_out - 0.5."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, t


def bilinear_resize(a, out_h, out_w):
    """Channelwise bilinear interpolation of an (h, w) or (h, w, c) grid.

    Uses the align_corners=False convention: output pixel (i, j) samples the
    source at ((i + 0.5) * h_in / h_out - 0.5, (j + 0.5) * w_in / w_out - 0.5)
    with edge clamping. Constant fields are preserved exactly.
    """
    a = _lift(a)
    if a.ndim not in (2, 3):
        raise ShapeError(f"bilinear_resize expects (h, w) or (h, w, c), got {a.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"invalid target extents {out_h}x{out_w}")
    h, w = a.shape[0], a.shape[1]
    y0, y1, ty = _bilinear_coeffs(h, out_h)
    x0, x1, tx = _bilinear_coeffs(w, out_w)
    squeeze = a.ndim == 2
    src = a.data[..., None] if squeeze else a.data

    ty_ = ty[:, None, None]
    tx_ = tx[None, :, None]
    # nested lerp keeps constant fields bit-exact (deltas vanish before scaling)
    v00 = src[np.ix_(y0, x0)]
    v01 = src[np.ix_(y0, x1)]
    v10 = src[np.ix_(y1, x0)]
    v11 = src[np.ix_(y1, x1)]
    top = v00 + tx_ * (v01 - v00)
    bot = v10 + tx_ * (v11 - v10)
    data = top + ty_ * (bot - top)
    if squeeze:
        data = data[..., 0]
    w00 = (1 - ty_) * (1 - tx_)
    w01 = (1 - ty_) * tx_
    w10 = ty_ * (1 - tx_)
    w11 = ty_ * tx_

    def back(g):
        gf = g[..., None] if squeeze else g
        acc = np.zeros((h, w, src.shape[2]), dtype=src.dtype)
        np.add.at(acc, np.ix_(y0, x0), w00 * gf)
        np.add.at(acc, np.ix_(y0, x1), w01 * gf)
        np.add.at(acc, np.ix_(y1, x0), w10 * gf)
        np.add.at(acc, np.ix_(y1, x1), w11 * gf)
        a._accumulate(acc[..., 0] if squeeze else acc)

    return _make_node(data, (a,), back, "bilinear_resize")


def custom_op(data, parents, backward_fn, name):
    """Register a fused primitive on the active tape.

    ``backward_fn(adjoint)`` must accumulate into each parent via
    ``parent._accumulate``. Used by ops whose forward is cheaper fused than
    composed (e.g. the pairwise agreement kernel).
    """
    return _make_node(np.asarray(data), tuple(parents), backward_fn, name)
