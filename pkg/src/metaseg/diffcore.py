"""Small reverse-mode differentiation layer on top of numpy.

Only the operations the segmentation model needs are provided. Every op
computes its forward value eagerly, stores the context its vector-Jacobian
product needs, and links the result to its inputs. ``backward`` walks that
graph in reverse topological order.

Tensors are never mutated once they are part of a graph; ops always return
fresh arrays. Non-finite values are rejected at every op boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import Box
from .errors import BoxError, ConfigError, NumericError, ShapeError, SizeError

__all__ = [
    "Tensor", "Graph", "make_op", "backward", "grad", "grad_check",
    "add", "sub", "mul", "neg", "sum", "mean", "reshape", "concat",
    "relu", "sigmoid", "exp", "log", "clip", "softmax", "smooth_l1",
    "linear", "conv2d", "max_pool2d", "group_norm", "roi_crop",
    "roi_crop_batch", "bilinear_resize", "interp_matrix", "interp_at",
]


def _check_finite(data: np.ndarray, where: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """Dense array that may take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap a forward result; ``vjp(g)`` must return one gradient (or None) per parent."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: Tuple[int, ...]
    tensor: Tensor


class Graph:
    """Topologically ordered view of the ops that produced some outputs."""

    def __init__(self, nodes: List[Node], outputs: Tuple[int, ...]):
        self.nodes = nodes
        self.outputs = outputs

    @classmethod
    def build(cls, *outputs: Tensor) -> "Graph":
        order: List[Tensor] = []
        index: Dict[int, int] = {}
        for root in outputs:
            stack = [(root, False)]
            while stack:
                t, expanded = stack.pop()
                if id(t) in index:
                    continue
                if expanded:
                    index[id(t)] = len(order)
                    order.append(t)
                    continue
                stack.append((t, True))
                for p in reversed(t._parents):
                    if id(p) not in index:
                        stack.append((p, False))
        nodes = [Node(i, t.op, tuple(index[id(p)] for p in t._parents), t)
                 for i, t in enumerate(order)]
        return cls(nodes, tuple(index[id(t)] for t in outputs))

    def leaves(self) -> List[Tensor]:
        return [n.tensor for n in self.nodes if n.tensor.is_leaf and n.tensor.requires_grad]

    def __len__(self):
        return len(self.nodes)


def backward(seed: Tensor, graph: Optional[Graph] = None) -> Dict[Tensor, np.ndarray]:
    """Gradients of the scalar ``seed`` w.r.t. every leaf with ``requires_grad``.

    Leaf ``.grad`` attributes are overwritten with the result.
    """
    if seed.data.size != 1:
        raise ShapeError(f"backward needs a scalar seed, got shape {seed.shape}")
    if graph is None:
        graph = Graph.build(seed)
    out: Dict[Tensor, np.ndarray] = {}
    if not seed.requires_grad:
        return out
    grads: Dict[int, np.ndarray] = {graph.outputs[0]: np.ones_like(seed.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        t = node.tensor
        if t.is_leaf:
            if t.requires_grad:
                g = np.zeros_like(t.data) if g is None else g
                t.grad = g
                out[t] = g
            continue
        if g is None:
            continue
        for pid, pg in zip(node.inputs, t._vjp(g)):
            if pg is None:
                continue
            prev = grads.get(pid)
            grads[pid] = pg if prev is None else prev + pg
    return out


def grad(seed: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``seed`` w.r.t. ``wrt``; zeros for leaves the seed does not reach."""
    got = backward(seed)
    return [got.get(t, np.zeros_like(t.data)) for t in wrt]


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-6,
               coords: Optional[Sequence[Optional[np.ndarray]]] = None) -> float:
    """Largest ``|analytic - fd| / max(1, |fd|)`` over the checked coordinates.

    ``fn`` receives one Tensor per input and returns a scalar Tensor. Central
    differences are taken in double precision. ``coords`` optionally restricts
    each input to a set of flat indices (None means all of them).
    """
    base = [np.array(np.asarray(x.data if isinstance(x, Tensor) else x), dtype=np.float64)
            for x in inputs]
    leaves = [Tensor(b, requires_grad=True) for b in base]
    analytic = grad(fn(*leaves), leaves)
    worst = 0.0
    for k, b in enumerate(base):
        flat_idx = np.arange(b.size) if coords is None or coords[k] is None else coords[k]
        for i in flat_idx:
            vals = []
            for sign in (1.0, -1.0):
                pert = [x.copy() for x in base]
                pert[k].reshape(-1)[i] += sign * eps
                vals.append(float(fn(*[Tensor(p) for p in pert]).data))
            fd = (vals[0] - vals[1]) / (2.0 * eps)
            a = float(analytic[k].reshape(-1)[i])
            worst = max(worst, abs(a - fd) / max(1.0, abs(fd)))
    return worst


# ----------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return make_op(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return make_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return make_op(a.data * b.data, (a, b), vjp, "mul")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return make_op(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), vjp, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise SizeError(f"concat along {axis}: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     if t.requires_grad else None for i, t in enumerate(tensors))
    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return make_op(s, (a,), vjp, "softmax")


def smooth_l1(a: Tensor) -> Tensor:
    """Elementwise Huber loss with unit threshold."""
    x = a.data
    small = np.abs(x) < 1.0
    out = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    return make_op(out, (a,), lambda g: (g * np.where(small, x, np.sign(x)),), "smooth_l1")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully-connected layer: ``x[N, in] @ weight[out, in].T + bias[out]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise SizeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        grads = [g @ weight.data if x.requires_grad else None,
                 g.T @ x.data if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)
    return make_op(out, parents, vjp, "linear")


# ----------------------------------------------------------------------------
# convolutional ops


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns ``[N*ho*wo, kh*kw*C]`` from a padded NHWC array, ordered (i, j, c)."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _nhwc_padded(a: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    n, c, h, w = a.shape
    out = np.zeros((n, h + 2 * pad_h, w + 2 * pad_w, c), dtype=a.dtype)
    out[:, pad_h:pad_h + h, pad_w:pad_w + w, :] = a.transpose(0, 2, 3, 1)
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N, C, H, W]`` with ``kernel[O, C, kh, kw]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise SizeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, c2, kh, kw = kernel.shape
    if c != c2:
        raise SizeError(f"conv2d: input has {c} channels, kernel expects {c2}")
    if stride < 1 or pad < 0:
        raise SizeError(f"conv2d: bad stride {stride} / pad {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise SizeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (o,):
        raise SizeError(f"conv2d: bias shape {bias.shape}, expected ({o},)")
    _check_finite(x.data, "conv2d input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if kh == kw == 1 and stride == 1 and pad == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    else:
        cols = _im2col(_nhwc_padded(x.data, pad, pad), kh, kw, stride, ho, wo)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gx = None
        if x.requires_grad and stride == 1 and pad < min(kh, kw):
            # full correlation of the output gradient with the flipped kernel
            gcols = _im2col(_nhwc_padded(g, kh - 1 - pad, kw - 1 - pad), kh, kw, 1, h, w)
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
            gx = np.ascontiguousarray((gcols @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2))
        elif x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))
        gk = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)
    return make_op(out, parents, vjp, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise SizeError(f"max_pool2d: input {h}x{w} too small")
    xr = x.data[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    windows = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * h2, :2 * w2] = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, 2 * h2, 2 * w2)
        return (gx,)
    return make_op(out, (x,), vjp, "max_pool2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ConfigError("group_norm: eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise SizeError(f"group_norm: affine parameters must have shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def vjp(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta
    return make_op(out, (x, gamma, beta), vjp, "group_norm")


# ----------------------------------------------------------------------------
# bilinear sampling


def interp_at(pos: np.ndarray, size: int, dtype=np.float64) -> np.ndarray:
    """Bilinear weight rows for sampling a length-``size`` axis at continuous ``pos``.

    Input pixel ``i`` has its centre at ``i + 0.5``; positions outside the
    centre range replicate the edge pixel.
    """
    p = np.clip(np.asarray(pos, dtype=np.float64) - 0.5, 0.0, size - 1)
    i0 = np.floor(p).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = p - i0
    m = np.zeros((p.size, size), dtype=dtype)
    rows = np.arange(p.size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def interp_matrix(start: float, length: float, n_out: int, size: int, dtype=np.float64) -> np.ndarray:
    """Weights sampling the ``n_out`` cell centres of ``[start, start + length)``."""
    return interp_at(start + (np.arange(n_out) + 0.5) * (length / n_out), size, dtype)


def _roi_matrices(box: Box, height: int, width: int, out_h: int, out_w: int,
                  scale: float, dtype):
    if box.w < 1.0 or box.h < 1.0:
        raise BoxError(f"degenerate box {box.as_tuple()}: extent below one pixel")
    clipped = box.clip(int(round(height / scale)), int(round(width / scale)))
    x0, y0, _, _ = clipped.corners
    my = interp_matrix(y0 * scale, clipped.h * scale, out_h, height, dtype)
    mx = interp_matrix(x0 * scale, clipped.w * scale, out_w, width, dtype)
    return my, mx


def roi_crop(feature: Tensor, box: Box, window: int, scale: float = 1.0) -> Tensor:
    """Bilinearly sample a ``window x window`` grid inside ``box`` from ``feature[C, H, W]``.

    ``box`` is given in image pixels; ``scale`` maps image pixels to feature
    cells (1/stride). The box is clipped to the image extent first.
    """
    if feature.ndim != 3:
        raise SizeError(f"roi_crop expects a [C, H, W] feature, got {feature.shape}")
    _, h, w = feature.shape
    my, mx = _roi_matrices(box, h, w, window, window, scale, feature.dtype)
    out = my @ feature.data @ mx.T

    def vjp(g):
        return (my.T @ g @ mx,)
    return make_op(out, (feature,), vjp, "roi_crop")


def roi_crop_batch(features: Tensor, batch_index: Sequence[int], boxes: Sequence[Box],
                   window: int, scale: float = 1.0) -> Tensor:
    """``roi_crop`` for many boxes over a ``[N, C, H, W]`` batch; returns ``[R, C, win, win]``."""
    if features.ndim != 4:
        raise SizeError(f"roi_crop_batch expects [N, C, H, W], got {features.shape}")
    if len(batch_index) != len(boxes):
        raise SizeError("roi_crop_batch: one batch index per box required")
    n, c, h, w = features.shape
    idx = np.asarray(batch_index, dtype=np.int64)
    mats = [_roi_matrices(b, h, w, window, window, scale, features.dtype) for b in boxes]
    my = np.stack([m[0] for m in mats])
    mx = np.stack([m[1] for m in mats])
    picked = features.data[idx]
    out = my[:, None] @ picked @ mx.transpose(0, 2, 1)[:, None]

    def vjp(g):
        per_roi = my.transpose(0, 2, 1)[:, None] @ g @ mx[:, None]
        gf = np.zeros_like(features.data)
        np.add.at(gf, idx, per_roi)
        return (gf,)
    return make_op(out, (features,), vjp, "roi_crop_batch")


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize ``x[C, h, w]`` to ``[C, out_h, out_w]`` with cell-centre sampling."""
    if out_h < 1 or out_w < 1:
        raise SizeError(f"bilinear_resize: bad output size {out_h}x{out_w}")
    if x.ndim != 3:
        raise SizeError(f"bilinear_resize expects [C, h, w], got {x.shape}")
    _, h, w = x.shape
    my = interp_matrix(0.0, float(h), out_h, h, x.dtype)
    mx = interp_matrix(0.0, float(w), out_w, w, x.dtype)
    out = my @ x.data @ mx.T
    return make_op(out, (x,), lambda g: (my.T @ g @ mx,), "bilinear_resize")


def as_leaves(arrays: Iterable[np.ndarray], requires_grad: bool = True) -> List[Tensor]:
    return [Tensor(a, requires_grad=requires_grad) for a in arrays]
