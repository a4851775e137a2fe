"""
Minimal reverse-mode automatic differentiation over dense numpy arrays.

Provides exactly the layer operations the vision path and the attention U-Net
need, a named parameter store, an SGD optimizer, finite-difference gradient
checking and the binary checkpoint format.
"""

import contextlib
import logging
import os
import struct
from collections import OrderedDict
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MBSCKPT1"
BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1
POOL_EPS = 1e-8

_DTYPE = np.float32

ArrayLike = Union["Tensor", np.ndarray, float, int]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible"""


class NonFiniteError(FloatingPointError):
    """Raised when an op or a gradient produces NaN or Inf"""


class CheckpointError(ValueError):
    """Raised for unreadable or mismatching checkpoint files"""


def set_precision(bits: int) -> None:
    """Select 32-bit (training) or 64-bit (gradient checking) values"""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")


def get_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the engine precision"""
    previous = 64 if _DTYPE == np.float64 else 32
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """Dense array node in a reverse-mode gradient graph"""

    __slots__ = ("values", "grad", "requires_grad", "op", "meta", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf",
                 parents: Tuple["Tensor", ...] = (), backward: Optional[Callable] = None):
        self.values = np.asarray(values, dtype=_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.meta: Dict[str, object] = {}
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op='{self.op}', requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def _topological_order(self) -> List["Tensor"]:
        """Post-order over the grad-requiring subgraph, each node once"""
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every grad-requiring leaf"""
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.values)
        grad = np.asarray(grad, dtype=_DTYPE)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = self._topological_order()
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = grad if self.grad is None or self._parents else self.grad + grad

        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                if pgrad.shape != parent.shape:
                    raise ShapeError(f"{node.op} backward produced {pgrad.shape} for input {parent.shape}")
                _check_finite(pgrad, f"gradient of {node.op}")
                parent.grad = pgrad if parent.grad is None else parent.grad + pgrad

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, op: str, parents: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    _check_finite(values, op)
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(values, op=op)
    return Tensor(values, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.values + b.values, "add", (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.values - b.values, "sub", (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)
    return _result(a.values * b.values, "mul", (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g / b.values, a.shape),
                _unbroadcast(-g * a.values / (b.values * b.values), b.shape))
    return _result(a.values / b.values, "div", (a, b), backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.values, "neg", (a,), lambda g: (-g,))


def tensor_abs(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.values), "abs", (a,), lambda g: (g * np.sign(a.values),))


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.ascontiguousarray(np.broadcast_to(g, a.shape)),)
    return _result(np.sum(a.values, axis=axes, keepdims=keepdims), "sum", (a,), backward)


def tensor_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tensor_sum(a, axes, keepdims) * (1.0 / count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _result(a.values.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _result(np.transpose(a.values, axes), "transpose", (a,),
                   lambda g: (np.transpose(g, inverse),))


def take(a: ArrayLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather slices along an axis; repeated indices accumulate gradient"""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        grad = np.zeros(np.moveaxis(a.values, axis, 0).shape, dtype=g.dtype)
        np.add.at(grad, indices, np.moveaxis(g, axis, 0))
        return (np.moveaxis(grad, 0, axis),)
    return _result(np.take(a.values, indices, axis=axis), "take", (a,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _result(np.concatenate([t.values for t in tensors], axis=axis), "concat", tensors, backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must agree"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(np.matmul(a.values, b.values), "matmul", (a, b), backward)


# ---------------------------------------------------------------------------
# Activations and losses
# ---------------------------------------------------------------------------

def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _result(np.where(mask, a.values, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: ArrayLike) -> Tensor:
    """Logistic function, kept one machine epsilon inside (0, 1)"""
    a = as_tensor(a)
    eps = np.finfo(a.values.dtype).eps
    s = np.clip(expit(a.values), eps, 1.0 - eps)
    return _result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def activation(a: ArrayLike, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation '{kind}' (expected relu or sigmoid)")


def bce_with_logits(logits: ArrayLike, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy in softplus form: max(x,0) - x*y + log1p(exp(-|x|))"""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=_DTYPE)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    x = logits.values
    loss = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * (expit(x) - targets),)
    return _result(loss, "bce_with_logits", (logits,), backward)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C, H', W', kh, kw) strided view"""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(cols: np.ndarray, out_shape: Tuple[int, ...], stride: int) -> np.ndarray:
    """Adjoint of _windows: cols (B, H', W', C, kh, kw) summed into (B, C, H, W)"""
    out = np.zeros(out_shape, dtype=cols.dtype)
    _, oh, ow, _, kh, kw = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _batched(x: Tensor, op: str) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"{op} expects C×H×W or B×C×H×W input, got shape {x.shape}")
    return x, False


def conv2d(x: ArrayLike, kernel: ArrayLike, bias: Optional[ArrayLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; H' = (H + 2*padding - kh) // stride + 1"""
    x, squeeze = _batched(as_tensor(x), "conv2d")
    kernel = as_tensor(kernel)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be C_out×C_in×kh×kw, got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d channel axis: input has {x.shape[1]}, kernel expects {c_in}")
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kh}×{kw} exceeds padded spatial dims {hp}×{wp}")
    parents: Tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d bias axis: expected ({c_out},), got {bias.shape}")
        parents = parents + (bias,)

    padded = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(padded, kh, kw, stride)
    out = np.tensordot(win, kernel.values, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.values[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, kernel.values, axes=([1], [0]))
        gx = _scatter_windows(cols, padded.shape, stride)
        gx = gx[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    result = _result(np.ascontiguousarray(out), "conv2d", parents, backward)
    return reshape(result, result.shape[1:]) if squeeze else result


def conv_transpose2d(x: ArrayLike, kernel: ArrayLike, bias: Optional[ArrayLike] = None,
                     stride: int = 1) -> Tensor:
    """Adjoint of conv2d with the same kernel array (kernel C_in×C_out×kh×kw)"""
    x, squeeze = _batched(as_tensor(x), "conv_transpose2d")
    kernel = as_tensor(kernel)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d kernel must be C_in×C_out×kh×kw, got {kernel.shape}")
    c_in, c_out, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv_transpose2d channel axis: input has {x.shape[1]}, kernel expects {c_in}")
    parents: Tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv_transpose2d bias axis: expected ({c_out},), got {bias.shape}")
        parents = parents + (bias,)

    batch, _, h, w = x.shape
    out_shape = (batch, c_out, (h - 1) * stride + kh, (w - 1) * stride + kw)
    cols = np.tensordot(x.values, kernel.values, axes=([1], [0]))
    # tensordot gives (B, H, W, C_out, kh, kw)
    out = _scatter_windows(cols, out_shape, stride)
    if bias is not None:
        out = out + bias.values[None, :, None, None]

    def backward(g):
        win = _windows(g, kh, kw, stride)
        gx = np.tensordot(win, kernel.values, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.values, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = (np.ascontiguousarray(gx), gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    result = _result(out, "conv_transpose2d", parents, backward)
    return reshape(result, result.shape[1:]) if squeeze else result


# ---------------------------------------------------------------------------
# Normalization, dropout, pooling, resampling
# ---------------------------------------------------------------------------

def batchnorm2d(x: ArrayLike, scale: ArrayLike, shift: ArrayLike,
                running_mean: np.ndarray, running_var: np.ndarray, training: bool,
                eps: float = BATCHNORM_EPS, momentum: float = BATCHNORM_MOMENTUM) -> Tensor:
    """Per-channel normalization over batch (+space) axes of B×C×H×W or B×C input.

    In training mode the running statistics arrays are updated in place.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects B×C×H×W or B×C input, got {x.shape}")
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError(f"batchnorm channel axis: input has {channels}, scale/shift {scale.shape}/{shift.shape}")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, channels, 1, 1) if x.ndim == 4 else (1, channels)
    count = x.size // channels

    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.values - running_mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = scale.values.reshape(bshape) * xhat + shift.values.reshape(bshape)

        def backward_eval(g):
            return (g * (scale.values * inv_std).reshape(bshape),
                    (g * xhat).sum(axis=axes), g.sum(axis=axes))
        return _result(out, "batchnorm2d", (x, scale, shift), backward_eval)

    if count < 2:
        raise ValueError(f"batchnorm in train mode needs >= 2 values per channel, got {count}")
    mean = x.values.mean(axis=axes)
    var = x.values.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = scale.values.reshape(bshape) * xhat + shift.values.reshape(bshape)

    running_mean *= (1.0 - momentum)
    running_mean += momentum * mean
    running_var *= (1.0 - momentum)
    running_var += momentum * var * count / (count - 1)

    def backward(g):
        dxhat = g * scale.values.reshape(bshape)
        gx = (inv_std.reshape(bshape) / count) * (
            count * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, "batchnorm2d", (x, scale, shift), backward)


def dropout(x: ArrayLike, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity in eval mode"""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(_DTYPE)
    out = _result(x.values * keep, "dropout", (x,), lambda g: (g * keep,))
    out.meta["mask"] = keep
    return out


def spatial_average_pool(x: ArrayLike) -> Tensor:
    """(B, C, H, W) or (C, H, W) -> per-channel spatial means"""
    return tensor_mean(x, axis=(-2, -1))


def max_pool2x2(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial dims, got {h}×{w}")
    blocks = x.values.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    winner = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = (np.arange(4) == winner[..., None]) * g[..., None]
        onehot = onehot.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(onehot, -2, -3).reshape(x.shape),)
    return _result(out, "max_pool2x2", (x,), backward)


def weighted_pool(x: ArrayLike, weight: ArrayLike, eps: float = POOL_EPS) -> Tensor:
    """Σ_ij w(i,j)·x(:,i,j) / (Σ_ij w(i,j) + eps) for x (B,C,H,W), weight (B,H,W).

    Rows whose weight map is all zero fall back to the unweighted mean; their
    indices are recorded in ``meta['fallback_rows']``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 3
    if squeeze:
        x, weight = reshape(x, (1,) + x.shape), reshape(weight, (1,) + weight.shape)
    if x.ndim != 4 or weight.shape != (x.shape[0],) + x.shape[2:]:
        raise ShapeError(f"weighted_pool weight {weight.shape} does not match features {x.shape}")
    if np.any(weight.values < 0):
        raise ValueError("weighted_pool weights must be nonnegative")

    totals = weight.values.sum(axis=(1, 2))
    fallback = totals <= 0.0
    w = np.where(fallback[:, None, None], 1.0, weight.values)
    den = w.sum(axis=(1, 2)) + eps
    out = np.einsum("bhw,bchw->bc", w, x.values) / den[:, None]

    def backward(g):
        gx = g[:, :, None, None] * (w / den[:, None, None])[:, None, :, :]
        gw = np.einsum("bc,bchw->bhw", g, x.values - out[:, :, None, None]) / den[:, None, None]
        gw = np.where(fallback[:, None, None], 0.0, gw)
        return gx, gw

    result = _result(out, "weighted_pool", (x, weight), backward)
    if np.any(fallback):
        rows = [int(r) for r in np.flatnonzero(fallback)]
        logger.warning("weighted pooling fell back to mean pooling for rows %s", rows)
        result.meta["fallback_rows"] = rows
    if squeeze:
        meta = result.meta
        result = reshape(result, result.shape[1:])
        result.meta.update(meta)
    return result


def pool(x: ArrayLike, kind: str, weight: Optional[ArrayLike] = None) -> Tensor:
    """Dispatch over the pooling kinds used by the two network paths"""
    if kind == "spatial_average":
        return spatial_average_pool(x)
    if kind == "max2x2":
        return max_pool2x2(x)
    if kind == "weighted":
        if weight is None:
            raise ValueError("weighted pooling needs a weight map")
        return weighted_pool(x, weight)
    raise ValueError(f"unknown pool kind '{kind}'")


def upsample_nearest(x: ArrayLike, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.values, factor, axis=-2), factor, axis=-1)

    def backward(g):
        *lead, h, w = g.shape
        g = g.reshape(*lead, h // factor, factor, w // factor, factor)
        return (g.sum(axis=(-3, -1)),)
    return _result(out, "upsample_nearest", (x,), backward)


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """x (B, D_in) @ weight(D_out, D_in)ᵀ + bias"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear feature axis: input has {x.shape[-1]}, weight expects {weight.shape[1]}")
    out = matmul(x, transpose(weight, (1, 0)))
    return out if bias is None else out + bias


# ---------------------------------------------------------------------------
# Parameters, optimizer, gradient checking, checkpoints
# ---------------------------------------------------------------------------

class LayerParams:
    """Named learnable parameters plus non-trainable buffers"""

    def __init__(self, rng: Optional[np.random.Generator] = None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def _claim(self, name: str) -> None:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate parameter name '{name}'")

    def add(self, name: str, values: np.ndarray) -> Tensor:
        self._claim(name)
        tensor = Tensor(values, requires_grad=True, op=f"param:{name}")
        self._params[name] = tensor
        return tensor

    def add_kernel(self, name: str, shape: Tuple[int, ...], fan_in: int) -> Tensor:
        """Uniform(-b, b) init with b = sqrt(6 / fan_in)"""
        bound = np.sqrt(6.0 / fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def add_zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def add_ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.ones(shape))

    def add_buffer(self, name: str, values: np.ndarray) -> np.ndarray:
        self._claim(name)
        self._buffers[name] = np.array(values, dtype=_DTYPE)
        return self._buffers[name]

    def add_conv(self, name: str, c_out: int, c_in: int, size: int, bias: bool = True) -> None:
        """Registers <name>.kernel (C_out×C_in×size×size) and optionally <name>.bias"""
        self.add_kernel(f"{name}.kernel", (c_out, c_in, size, size), fan_in=c_in * size * size)
        if bias:
            self.add_zeros(f"{name}.bias", (c_out,))

    def add_conv_transpose(self, name: str, c_in: int, c_out: int, size: int, stride: int) -> None:
        """Registers <name>.kernel (C_in×C_out×size×size) and <name>.bias"""
        taps = max(1, (size // stride) ** 2)
        self.add_kernel(f"{name}.kernel", (c_in, c_out, size, size), fan_in=c_in * taps)
        self.add_zeros(f"{name}.bias", (c_out,))

    def add_linear(self, name: str, d_out: int, d_in: int) -> None:
        self.add_kernel(f"{name}.weight", (d_out, d_in), fan_in=d_in)
        self.add_zeros(f"{name}.bias", (d_out,))

    def add_batchnorm(self, name: str, channels: int) -> None:
        self.add_ones(f"{name}.scale", (channels,))
        self.add_zeros(f"{name}.shift", (channels,))
        self.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.add_buffer(f"{name}.running_var", np.ones(channels))

    def conv(self, name: str, x: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
        bias = self._params.get(f"{name}.bias")
        return conv2d(x, self._params[f"{name}.kernel"], bias, stride=stride, padding=padding)

    def conv_transpose(self, name: str, x: ArrayLike, stride: int) -> Tensor:
        return conv_transpose2d(x, self._params[f"{name}.kernel"], self._params[f"{name}.bias"], stride=stride)

    def linear(self, name: str, x: ArrayLike) -> Tensor:
        return linear(x, self._params[f"{name}.weight"], self._params[f"{name}.bias"])

    def batchnorm(self, name: str, x: ArrayLike, training: bool) -> Tensor:
        return batchnorm2d(x, self._params[f"{name}.scale"], self._params[f"{name}.shift"],
                           self._buffers[f"{name}.running_mean"], self._buffers[f"{name}.running_var"],
                           training)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self._buffers

    def __len__(self) -> int:
        return len(self._params)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def names(self) -> List[str]:
        return list(self._params) + list(self._buffers)

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Params then buffers, in registration order"""
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, tensor in self._params.items():
            state[name] = tensor.values
        for name, values in self._buffers.items():
            state[name] = values
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """Replace all values; every name and shape must match"""
        problems = []
        expected = self.state()
        for name, values in expected.items():
            if name not in state:
                problems.append(f"missing '{name}' {values.shape}")
            elif state[name].shape != values.shape:
                problems.append(f"shape of '{name}': checkpoint {state[name].shape}, model {values.shape}")
        for name in state:
            if name not in expected:
                problems.append(f"unexpected '{name}' {state[name].shape}")
        if problems:
            raise CheckpointError("checkpoint does not match the model:\n  " + "\n  ".join(problems))
        for name, tensor in self._params.items():
            tensor.values = np.array(state[name], dtype=_DTYPE)
            tensor.grad = None
        for name in self._buffers:
            self._buffers[name][...] = state[name]

    def cast(self) -> None:
        """Re-cast every value to the current engine precision"""
        for tensor in self._params.values():
            tensor.values = tensor.values.astype(_DTYPE)
        for name in self._buffers:
            self._buffers[name] = self._buffers[name].astype(_DTYPE)


class SGD:
    """Stochastic gradient descent with momentum"""

    def __init__(self, params: LayerParams, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            grad = tensor.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * tensor.values
            velocity = self._velocity.get(name)
            velocity = grad if velocity is None else self.momentum * velocity + grad
            self._velocity[name] = velocity
            tensor.values = (tensor.values - self.lr * velocity).astype(_DTYPE)


def grad_check(f: Callable[[], Tensor], theta: Tensor, step: float = 1e-6,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` rebuilds the graph from ``theta`` on every call and returns a scalar.
    """
    if _DTYPE != np.float64:
        raise ValueError("grad_check needs 64-bit precision (use tensor.precision(64))")
    theta.grad = None
    loss = f()
    _check_finite(loss.values, "grad_check objective")
    loss.backward()
    analytic = theta.grad if theta.grad is not None else np.zeros_like(theta.values)
    analytic = analytic.reshape(-1).copy()

    coords = np.arange(theta.size)
    if max_coords is not None and theta.size > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(theta.size, size=max_coords, replace=False))

    original = theta.values
    worst = 0.0
    try:
        for index in coords:
            values = original.copy().reshape(-1)
            values[index] += step
            theta.values = values.reshape(original.shape)
            plus = f().item()
            values[index] -= 2 * step
            theta.values = values.reshape(original.shape)
            minus = f().item()
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteError("grad_check objective is not finite near theta")
            numeric = (plus - minus) / (2 * step)
            err = abs(analytic[index] - numeric) / max(1.0, abs(analytic[index]))
            worst = max(worst, err)
    finally:
        theta.values = original
    return worst


def grad_check_params(f: Callable[[], Tensor], params: LayerParams, step: float = 1e-6,
                      coords_per_param: int = 4, rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """grad_check every parameter of a store on a sample of coordinates"""
    rng = rng if rng is not None else np.random.default_rng(0)
    return {name: grad_check(f, tensor, step, coords_per_param, rng) for name, tensor in params.items()}


def save_checkpoint(state: Dict[str, np.ndarray], path: Union[str, os.PathLike]) -> None:
    """Write the MBSCKPT1 format atomically (temp file then rename)"""
    path = os.fspath(path)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(state)))
        for name, values in state.items():
            encoded = name.encode("utf-8")
            values = np.asarray(values)
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", values.ndim))
            f.write(struct.pack(f"<{values.ndim}I", *values.shape))
            f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    os.replace(tmp_path, path)


def load_checkpoint(path: Union[str, os.PathLike]) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        data = f.read()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)

    def read(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        value = struct.unpack_from(fmt, data, offset)
        offset += size
        return value

    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    (count,) = read("<I")
    for _ in range(count):
        (name_len,) = read("<I")
        if offset + name_len > len(data):
            raise CheckpointError(f"{path}: truncated in entry name")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = read("<I")
        dims = read(f"<{rank}I") if rank else ()
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset + n_bytes > len(data):
            raise CheckpointError(f"{path}: truncated in values of '{name}'")
        state[name] = np.frombuffer(data, dtype="<f4", count=n_bytes // 4, offset=offset).reshape(dims).copy()
        offset += n_bytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes after {count} entries")
    return state
