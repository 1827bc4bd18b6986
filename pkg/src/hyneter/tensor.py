"""Dense float64 tensors with reverse-mode differentiation.

Every numeric value in this package is a :class:`Tensor`, a thin wrapper
around a C-contiguous float64 numpy array.  Operations are pure functions
over their inputs; when any input is attached to a :class:`DiffRecord`,
the result is attached to the same record and a backward rule is appended,
so a later :func:`backward` call can produce gradients for every registered
parameter.  One record covers one training step and is never shared
between concurrent steps.

Reductions delegate to numpy's deterministic kernels, so identical inputs
give bit-identical outputs within a process.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DiffRecord",
    "backward",
    "add",
    "mul",
    "mul_const",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "tanh",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "linear",
    "conv2d",
    "permute_tokens",
    "mean",
    "cross_entropy",
]

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A dense float64 array, optionally linked into a differentiation record."""

    __slots__ = ("data", "record", "node_id")

    def __init__(self, data, record: Optional["DiffRecord"] = None,
                 node_id: Optional[int] = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also promote 0-d to 1-d, so gate it
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.record = record
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tracked = "" if self.record is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("tag", "input_ids", "backward_fn")

    def __init__(self, tag, input_ids, backward_fn):
        self.tag = tag
        self.input_ids = input_ids
        self.backward_fn = backward_fn


class DiffRecord:
    """Append-only tape of operations for one reverse-mode sweep.

    Leaves are either named parameters (their gradients are returned by
    :meth:`backward`) or watched inputs.  Node inputs always precede the
    node, so a single reverse pass over ids visits every node once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._params: dict[str, Tensor] = {}
        self._param_node: dict[str, int] = {}

    def __len__(self):
        return len(self._nodes)

    def _append(self, tag: str, input_ids: tuple, backward_fn) -> int:
        self._nodes.append(_Node(tag, input_ids, backward_fn))
        return len(self._nodes) - 1

    def parameter(self, path: str, data) -> Tensor:
        """Register a named leaf whose gradient backward() will report."""
        if path in self._params:
            raise ValueError(f"duplicate parameter path {path!r}")
        t = Tensor(data, self, self._append(f"param:{path}", (), None))
        self._params[path] = t
        self._param_node[path] = t.node_id
        return t

    def watch(self, data, tag: str = "input") -> Tensor:
        """Track a leaf input without reporting its gradient."""
        return Tensor(data, self, self._append(tag, (), None))

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        """Gradients of a scalar loss for every registered parameter.

        Parameters the loss never touched get zero gradients.
        """
        if loss.record is not self or loss.node_id is None:
            raise ValueError("loss tensor is not recorded on this record")
        if loss.data.shape != ():
            raise ValueError(
                f"loss must be scalar, got shape {loss.data.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self._nodes)
        grads[loss.node_id] = np.ones((), dtype=np.float64)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            node = self._nodes[nid]
            if g is None or node.backward_fn is None:
                continue
            for iid, ig in zip(node.input_ids, node.backward_fn(g)):
                if iid is None or ig is None:
                    continue
                if grads[iid] is None:
                    grads[iid] = ig
                else:
                    grads[iid] = grads[iid] + ig
        out = {}
        for path, t in self._params.items():
            g = grads[self._param_node[path]]
            if g is None:
                g = np.zeros(t.data.shape)
            out[path] = Tensor(g)
        return out


def backward(record: DiffRecord, loss: Tensor) -> dict[str, Tensor]:
    """Module-level alias for :meth:`DiffRecord.backward`."""
    return record.backward(loss)


# ---------------------------------------------------------------------------
# plumbing


def _data(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.ascontiguousarray(x, dtype=np.float64)


def _record_of(*tensors) -> Optional[DiffRecord]:
    rec = None
    for t in tensors:
        if isinstance(t, Tensor) and t.record is not None:
            if rec is None:
                rec = t.record
            elif rec is not t.record:
                raise ValueError("inputs belong to different diff records")
    return rec


def _emit(tag: str, data: np.ndarray, inputs: Sequence,
          backward_fn: Optional[Callable]) -> Tensor:
    rec = _record_of(*inputs)
    if rec is None:
        return Tensor(data)
    ids = tuple(
        t.node_id if isinstance(t, Tensor) and t.record is rec else None
        for t in inputs)
    return Tensor(data, rec, rec._append(tag, ids, backward_fn))


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over the leading axes a bias-style add broadcast over."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    """Elementwise sum; the second operand may be a trailing-shape bias."""
    ad, bd = _data(a), _data(b)
    if ad.shape != bd.shape and (bd.ndim > ad.ndim
                                 or ad.shape[ad.ndim - bd.ndim:] != bd.shape):
        raise ValueError(f"add shapes {ad.shape} and {bd.shape} are not "
                         "equal and the second is not a trailing bias")
    out = ad + bd

    def bwd(g):
        return g, _reduce_to(g, bd.shape)

    return _emit("add", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    """Hadamard product of same-shaped tensors."""
    ad, bd = _data(a), _data(b)
    if ad.shape != bd.shape:
        raise ValueError(f"mul shapes {ad.shape} and {bd.shape} differ")
    out = ad * bd

    def bwd(g):
        return g * bd, g * ad

    return _emit("mul", out, (a, b), bwd)


def mul_const(a, c) -> Tensor:
    """Multiply by an untracked constant array broadcastable to a's shape."""
    ad = _data(a)
    cd = np.asarray(c, dtype=np.float64)
    out = ad * cd

    def bwd(g):
        return (g * cd,)

    return _emit("mul_const", out, (a,), bwd)


def scale(a, s: float) -> Tensor:
    return mul_const(a, float(s))


def matmul(a, b) -> Tensor:
    """Matrix product; accepts stacked lhs with a 2-D rhs or equal batches."""
    ad, bd = _data(a), _data(b)
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(
            f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    ad = _data(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _emit("transpose", np.ascontiguousarray(ad.transpose(axes)),
                 (a,), bwd)


def reshape(a, shape: Sequence[int]) -> Tensor:
    ad = _data(a)
    old = ad.shape

    def bwd(g):
        return (g.reshape(old),)

    return _emit("reshape", ad.reshape(tuple(shape)), (a,), bwd)


def tanh(a) -> Tensor:
    y = np.tanh(_data(a))

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _emit("tanh", y, (a,), bwd)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = _data(a)
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit("gelu", y, (a,), bwd)


def softmax_rows(a) -> Tensor:
    """Softmax along the trailing axis, max-shifted for stability."""
    x = _data(a)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), bwd)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing channel axis to mean 0 / variance 1, then
    apply a per-channel affine map."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    xd, gd, sd = _data(x), _data(gain), _data(shift)
    c = xd.shape[-1]
    if gd.shape != (c,) or sd.shape != (c,):
        raise ValueError(f"layer_norm affine shapes {gd.shape}/{sd.shape} "
                         f"do not match channel count {c}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    y = xn * gd + sd

    def bwd(g):
        gxn = g * gd
        gx = inv * (gxn - gxn.mean(axis=-1, keepdims=True)
                    - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        ggain = _reduce_to(g * xn, gd.shape)
        gshift = _reduce_to(g, sd.shape)
        return gx, ggain, gshift

    return _emit("layer_norm", y, (x, gain, shift), bwd)


def linear(x, weights, bias=None) -> Tensor:
    """Affine map over the trailing feature axis."""
    xd, wd = _data(x), _data(weights)
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(
            f"linear input features {xd.shape} do not match weights {wd.shape}")
    y = matmul(x, weights)
    if bias is None:
        return y
    bd = _data(bias)
    if bd.shape != (wd.shape[1],):
        raise ValueError(
            f"linear bias shape {bd.shape} does not match output dim "
            f"{wd.shape[1]}")
    return add(y, bias)


# ---------------------------------------------------------------------------
# convolution


def _out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """All k-by-k patches of a padded [N,C,Hp,Wp] input, stride applied."""
    w = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def conv2d(x, weights, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an [N,Cin,H,W] batch with [Cout,Cin,k,k]
    kernels.

    Computed directly (im2col then one matrix product); no FFT or Winograd
    path exists, so the result is the literal windowed sum the shape
    contract describes.
    """
    xd, wd = _data(x), _data(weights)
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ValueError(
            f"conv2d expects [N,C,H,W] input and [Cout,Cin,k,k] weights, "
            f"got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {xd.shape[1]} channels "
            f"(shape {xd.shape}) but weights expect {wd.shape[1]} "
            f"(shape {wd.shape})")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding: {stride}/{padding}")
    n, cin, h, w = xd.shape
    cout, _, k, _ = wd.shape
    oh, ow = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d output would be empty: input {xd.shape}, kernel {k}, "
            f"stride {stride}, padding {padding}")
    bd = None
    if bias is not None:
        bd = _data(bias)
        if bd.shape != (cout,):
            raise ValueError(
                f"conv2d bias shape {bd.shape} does not match {cout} output "
                "channels")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(xp, k, stride)                    # [N,Cin,OH,OW,k,k]
    cols2 = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * k * k)
    wmat = wd.reshape(cout, cin * k * k)
    out2 = cols2 @ wmat.T
    if bd is not None:
        out2 = out2 + bd
    out = out2.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
        gw = (g2.T @ cols2).reshape(wd.shape)
        gcols = (g2 @ wmat).reshape(n, oh, ow, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * oh:stride,
                    j:j + stride * ow:stride] += gcols[:, :, :, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        gb = None if bd is None else g2.sum(axis=0)
        return np.ascontiguousarray(gx), gw, gb

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return _emit("conv2d", out, inputs, bwd)


# ---------------------------------------------------------------------------
# indexing and reductions


def permute_tokens(x, perm: np.ndarray) -> Tensor:
    """Reorder the token axis of [N,L,C] by a fixed gather index:
    out[:, i] = x[:, perm[i]]."""
    xd = _data(x)
    perm = np.asarray(perm, dtype=np.intp)
    if xd.ndim != 3 or perm.shape != (xd.shape[1],):
        raise ValueError(
            f"permute_tokens expects [N,L,C] and a length-L index, got "
            f"{xd.shape} and {perm.shape}")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    out = np.ascontiguousarray(xd[:, perm, :])

    def bwd(g):
        return (np.ascontiguousarray(g[:, inv, :]),)

    return _emit("permute_tokens", out, (x,), bwd)


def mean(a, axes: Optional[Iterable[int]] = None) -> Tensor:
    """Mean over the given axes (all axes when omitted, yielding a scalar)."""
    ad = _data(a)
    if axes is None:
        axes = tuple(range(ad.ndim))
    else:
        axes = tuple(sorted(ax % ad.ndim for ax in axes))
    count = 1
    for ax in axes:
        count *= ad.shape[ax]
    out = ad.mean(axis=axes)

    def bwd(g):
        ge = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(ge / count, ad.shape).copy(),)

    return _emit("mean", out, (a,), bwd)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of [N,K] logits against integer labels."""
    xd = _data(logits)
    lab = np.asarray(labels, dtype=np.intp)
    if xd.ndim != 2 or lab.shape != (xd.shape[0],):
        raise ValueError(
            f"cross_entropy expects [N,K] logits and N labels, got "
            f"{xd.shape} and {lab.shape}")
    n = xd.shape[0]
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    loss = np.float64((lse - shifted[np.arange(n), lab]).mean())

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), lab] -= 1.0
        return (g * p / n,)

    return _emit("cross_entropy", np.asarray(loss), (logits,), bwd)
