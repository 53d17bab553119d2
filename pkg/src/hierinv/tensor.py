"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a node that remembers its parents and a closure computing
the parents' gradients from the output gradient. ``Tensor.backward`` walks
the graph in reverse topological order exactly once per node.

Training runs in float32. ``precision(np.float64)`` switches newly created
tensors to float64, which the gradient-check tests use for tight tolerances.
"""
from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float32
_DEBUG = False
_CONV_BACKEND = "auto"

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
L2_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily create tensors with ``dtype`` (float32 or float64)."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward result for NaN/Inf."""
    global _DEBUG
    old, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = old


def set_conv_backend(name: str) -> None:
    """Select the convolution kernels: "numpy" (im2col), "torch" (aten kernels) or "auto"."""
    global _CONV_BACKEND
    if name not in ("auto", "numpy", "torch"):
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch" and _torch() is None:
        raise ImportError("torch is not installed")
    _CONV_BACKEND = name


def conv_backend() -> str:
    if _CONV_BACKEND == "auto":
        return "torch" if _torch() is not None else "numpy"
    return _CONV_BACKEND


_TORCH = False


def _torch():
    global _TORCH
    if _TORCH is False:
        try:
            import torch
            torch.set_num_threads(1)
            _TORCH = torch
        except ImportError:
            _TORCH = None
    return _TORCH


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every node that requires it.

        Leaf gradients accumulate across calls; callers zero them between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"non-finite output from {op} on finite inputs")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = a.data * mask
    return _make(out, (a,), lambda g: (g * mask,), "relu")


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; the result has no parents, so nothing flows back."""
    return Tensor(a.data, requires_grad=False, op="stop_gradient")


# -- shape ops -------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _is_fancy(index) else _slice_add(full, index, g)
        return (full,)

    return _make(out, (a,), backward, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _slice_add(full, index, g):
    full[index] += g


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    pieces, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        pieces.append(take(a, tuple(idx)))
        start += n
    return pieces


# -- reductions ------------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def global_average_pool(a: Tensor) -> Tensor:
    """NCHW -> NC by averaging the spatial extent."""
    if a.ndim != 4:
        raise ShapeError(f"global_average_pool expects NCHW, got shape {a.shape}")
    return mean(a, axis=(2, 3))


# -- linear algebra --------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight stored as (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "linear")


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKK kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {weight.shape} larger than padded input {x.shape}")
    if conv_backend() == "torch":
        return _conv2d_torch(x, weight, stride, padding)
    return _conv2d_im2col(x, weight, stride, padding)


def _conv2d_im2col(x: Tensor, weight: Tensor, stride: int, padding: int) -> Tensor:
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, weight), backward, "conv2d")


def _conv2d_torch(x: Tensor, weight: Tensor, stride: int, padding: int) -> Tensor:
    torch = _torch()
    xt = torch.from_numpy(np.ascontiguousarray(x.data))
    wt = torch.from_numpy(np.ascontiguousarray(weight.data))
    with torch.no_grad():
        out = torch.nn.functional.conv2d(xt, wt, stride=stride, padding=padding).numpy()

    def backward(g):
        gt = torch.from_numpy(np.ascontiguousarray(g))
        with torch.no_grad():
            gx, gw, _ = torch.ops.aten.convolution_backward(
                gt, xt, wt, None, [stride, stride], [padding, padding], [1, 1], False, [0, 0], 1,
                [x.requires_grad, True, False])
        return (gx.numpy() if gx is not None else None), gw.numpy()

    return _make(out, (x, weight), backward, "conv2d")


# -- normalisation ---------------------------------------------------------
class RunningStats:
    """Per-channel running mean/variance for inference-mode batch norm."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        self.mean = np.zeros(channels, dtype=_DTYPE)
        self.var = np.ones(channels, dtype=_DTYPE)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * batch_mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * batch_var_unbiased).astype(self.var.dtype)


def batch_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, running_stats: RunningStats | None = None,
               training: bool = True, eps: float = BN_EPS) -> Tensor:
    """Batch norm over (N,) for NC inputs or (N, H, W) for NCHW inputs.

    ``gamma``/``beta`` may be None for a non-affine normalisation.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects NC or NCHW, got {x.shape}")
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"batch_norm {name} shape {p.shape} does not match channels {c}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(f"batch_norm in training mode needs batch >= 2, got {x.shape[0]}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_stats is not None:
            count = x.data.size // c
            running_stats.update(mu, var * count / (count - 1))
    else:
        if running_stats is None:
            raise ValueError("batch_norm in eval mode needs running statistics")
        mu, var = running_stats.mean, running_stats.var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)

    def backward(g):
        gg = g.sum(axis=axes) if beta is not None else None
        ggam = (g * xhat).sum(axis=axes) if gamma is not None else None
        gxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        if training:
            m = x.data.size // c
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        grads = [gx]
        if gamma is not None:
            grads.append(ggam)
        if beta is not None:
            grads.append(gg)
        return tuple(grads)

    parents = tuple(p for p in (x, gamma, beta) if p is not None)
    return _make(out, parents, backward, "batch_norm")


def l2_normalize(v: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """v / (||v|| + eps) along ``axis``; zero slices stay zero."""
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    denom = norm + eps
    out = v.data / denom

    def backward(g):
        # d/dv [v / (|v| + eps)] = g/denom - v * <g, v> / (|v| * denom^2)
        dot = (g * v.data).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - v.data * dot / (safe * denom * denom),)

    return _make(out, (v,), backward, "l2_normalize")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=1)
    picked = take(logp, (np.arange(labels.shape[0]), labels))
    return -mean(picked)


# -- serialisation ---------------------------------------------------------
def write_tensor(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    """name (u32 length + UTF-8), rank (u32), extents (u32 LE each), float32 LE payload."""
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"expected {n} bytes, got {len(buf)}")
    return buf


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
