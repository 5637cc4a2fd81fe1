"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every op in creation order, so the node list is
already topologically sorted and :meth:`Tape.backward` is a single reverse
sweep. Layers work on batched arrays (leading batch axis); the conv and pool
helpers also accept a single unbatched sample.

Convolutions use the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, ShapeError, SignetError

__all__ = [
    "NonFiniteError",
    "Node",
    "Tape",
    "add",
    "scale",
    "matmul",
    "sum_all",
    "mean_all",
    "reshape",
    "relu",
    "conv1d",
    "conv2d",
    "max_pool1d",
    "max_pool2d",
    "global_avg_pool",
    "dense",
    "batch_norm",
    "softmax_cross_entropy",
    "conv_output_length",
    "numerical_gradient",
    "relative_error",
    "finite_diff_check",
]

DTYPE = np.float64


class NonFiniteError(SignetError, FloatingPointError):
    pass


class Node:
    """One recorded value on a tape.

    A node refers to its tape weakly; keep the tape alive for as long as you
    need to record further ops or run backward.
    """

    __slots__ = ("id", "op", "parents", "value", "grad", "_tape", "requires_grad", "name", "_backward")

    def __init__(self, tape, value, op, parents=(), backward=None, requires_grad=False, name=None):
        self._tape = weakref.ref(tape)
        self.id = len(tape.nodes)
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward = backward

    @property
    def tape(self):
        tape = self._tape()
        if tape is None:
            raise ContractError("the tape this node was recorded on no longer exists")
        return tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of nodes plus the set of parameter nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[int, str] = {}

    def param(self, value, name: str) -> Node:
        node = Node(self, np.asarray(value, dtype=DTYPE), "param", requires_grad=True, name=name)
        self.nodes.append(node)
        self.params[node.id] = name
        return node

    def constant(self, value, name=None) -> Node:
        node = Node(self, np.asarray(value, dtype=DTYPE), "const", name=name)
        self.nodes.append(node)
        return node

    def record(self, value, op: str, parents: Sequence[Node], backward: Callable) -> Node:
        """Append the output of an op.

        ``backward(g)`` must return one gradient (or None) per parent.
        """
        for p in parents:
            if p._tape() is not self:
                raise ContractError(f"op {op!r} mixes nodes from different tapes")
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite values produced by op {op!r}")
        req = any(p.requires_grad for p in parents)
        node = Node(self, value, op, parents, backward if req else None, requires_grad=req)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar ``loss``; returns ``{param name: grad}``."""
        if loss._tape() is not self or loss.id >= len(self.nodes) or self.nodes[loss.id] is not loss:
            raise ContractError("loss node is not on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = pending.pop(node.id, None)
            if g is None:
                continue
            if node.id in self.params:
                node.grad = g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in pending:
                    pending[parent.id] = pending[parent.id] + pg
                else:
                    pending[parent.id] = pg
        grads = {}
        for pid, name in self.params.items():
            node = self.nodes[pid]
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            grads[name] = node.grad
        return grads


def _tape_of(*nodes):
    return nodes[0].tape


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise / algebra -------------------------------------------------


def add(a: Node, b: Node) -> Node:
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _tape_of(a).record(out, "add", (a, b), backward)


def scale(a: Node, c: float) -> Node:
    return _tape_of(a).record(a.value * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Node, b: Node) -> Node:
    """Matrix product over the last two axes: C = A·B."""
    A, B = a.value, b.value
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {A.shape} and {B.shape}")

    def backward(g):
        da = g @ np.swapaxes(B, -1, -2)
        db = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(da, A.shape), _unbroadcast(db, B.shape)

    return _tape_of(a).record(A @ B, "matmul", (a, b), backward)


def sum_all(a: Node) -> Node:
    shape = a.shape
    return _tape_of(a).record(np.asarray(a.value.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Node) -> Node:
    shape, n = a.shape, a.value.size
    return _tape_of(a).record(
        np.asarray(a.value.mean()), "mean", (a,), lambda g: (np.full(shape, float(g) / n),)
    )


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _tape_of(a).record(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _tape_of(a).record(a.value * mask, "relu", (a,), lambda g: (g * mask,))


# -- convolution -----------------------------------------------------------


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    """``floor((L + 2p - k) / s) + 1``."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if length + 2 * padding < kernel:
        raise ShapeError(f"kernel {kernel} larger than padded input {length + 2 * padding}")
    return (length + 2 * padding - kernel) // stride + 1


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _conv2d_forward(x, w, stride, padding):
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv input has {C} channels but kernel expects {Cw} (x {x.shape}, w {w.shape})")
    sh, sw = stride
    ph, pw = padding
    Ho = conv_output_length(H, kh, sh, ph)
    Wo = conv_output_length(W, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, (Ho, Wo)


def _conv2d_backward(g, x_shape, w, cols, stride, padding, out_hw, need_dx=True):
    B, C, H, W = x_shape
    O, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    Ho, Wo = out_hw
    gf = g.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (gf.T @ cols).reshape(w.shape)
    if not need_dx:
        return None, dw
    dcols = (gf @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw] += dcols[:, :, i, j]
    return dxp[:, :, ph : ph + H, pw : pw + W], dw


def conv2d(x: Node, w: Node, b: Node | None = None, stride=1, padding=0) -> Node:
    """2D cross-correlation. ``x``: (B, C, H, W) or (C, H, W); ``w``: (O, C, kh, kw)."""
    stride, padding = _pair(stride), _pair(padding)
    unbatched = x.value.ndim == 3
    xv = x.value[None] if unbatched else x.value
    if xv.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, got {x.shape} and {w.shape}")
    out, cols, hw = _conv2d_forward(xv, w.value, stride, padding)
    if b is not None:
        out = out + b.value.reshape(1, -1, 1, 1)
    x_shape = xv.shape
    wv = w.value

    def backward(g):
        g4 = g[None] if unbatched else g
        dx, dw = _conv2d_backward(g4, x_shape, wv, cols, stride, padding, hw, x.requires_grad)
        if unbatched and dx is not None:
            dx = dx[0]
        if b is None:
            return dx, dw
        return dx, dw, g4.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _tape_of(x).record(out[0] if unbatched else out, "conv2d", parents, backward)


def conv1d(x: Node, w: Node, b: Node | None = None, stride: int = 1, padding: int = 0) -> Node:
    """1D cross-correlation. ``x``: (B, C, L) or (C, L); ``w``: (O, C, k)."""
    unbatched = x.value.ndim == 2
    xv = x.value[None] if unbatched else x.value
    if xv.ndim != 3 or w.value.ndim != 3:
        raise ShapeError(f"conv1d expects 3D input and kernel, got {x.shape} and {w.shape}")
    x4 = xv[:, :, None, :]
    w4 = w.value[:, :, None, :]
    out, cols, hw = _conv2d_forward(x4, w4, (1, stride), (0, padding))
    out = out[:, :, 0, :]
    if b is not None:
        out = out + b.value.reshape(1, -1, 1)
    x_shape = x4.shape

    def backward(g):
        g3 = g[None] if unbatched else g
        dx, dw = _conv2d_backward(g3[:, :, None, :], x_shape, w4, cols, (1, stride), (0, padding), hw, x.requires_grad)
        dw = dw[:, :, 0, :]
        if dx is not None:
            dx = dx[:, :, 0, :]
        if unbatched and dx is not None:
            dx = dx[0]
        if b is None:
            return dx, dw
        return dx, dw, g3.sum(axis=(0, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _tape_of(x).record(out[0] if unbatched else out, "conv1d", parents, backward)


# -- pooling ---------------------------------------------------------------


def max_pool2d(x: Node, size: int = 2) -> Node:
    """Non-overlapping max pooling. Odd trailing rows/cols are dropped (floor)."""
    unbatched = x.value.ndim == 3
    xv = x.value[None] if unbatched else x.value
    B, C, H, W = xv.shape
    Ho, Wo = H // size, W // size
    blocks = (
        xv[:, :, : Ho * size, : Wo * size]
        .reshape(B, C, Ho, size, Wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, Ho, Wo, size * size)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = g[None] if unbatched else g
        dblocks = np.zeros((B, C, Ho, Wo, size * size), dtype=DTYPE)
        np.put_along_axis(dblocks, idx[..., None], g4[..., None], axis=-1)
        dx = np.zeros((B, C, H, W), dtype=DTYPE)
        dx[:, :, : Ho * size, : Wo * size] = (
            dblocks.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        )
        return (dx[0] if unbatched else dx,)

    return _tape_of(x).record(out[0] if unbatched else out, "max_pool2d", (x,), backward)


def max_pool1d(x: Node, size: int = 2) -> Node:
    unbatched = x.value.ndim == 2
    xv = x.value[None] if unbatched else x.value
    B, C, L = xv.shape
    Lo = L // size
    blocks = xv[:, :, : Lo * size].reshape(B, C, Lo, size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        g3 = g[None] if unbatched else g
        dblocks = np.zeros((B, C, Lo, size), dtype=DTYPE)
        np.put_along_axis(dblocks, idx[..., None], g3[..., None], axis=-1)
        dx = np.zeros((B, C, L), dtype=DTYPE)
        dx[:, :, : Lo * size] = dblocks.reshape(B, C, Lo * size)
        return (dx[0] if unbatched else dx,)

    return _tape_of(x).record(out[0] if unbatched else out, "max_pool1d", (x,), backward)


def global_avg_pool(x: Node) -> Node:
    """Mean over every axis after the channel axis: (B, C, ...) -> (B, C)."""
    xv = x.value
    axes = tuple(range(2, xv.ndim))
    n = int(np.prod([xv.shape[a] for a in axes]))
    shape = xv.shape

    def backward(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / n, shape).copy(),)

    return _tape_of(x).record(xv.mean(axis=axes), "global_avg_pool", (x,), backward)


# -- dense / normalization / loss -------------------------------------------


def dense(x: Node, W: Node, b: Node | None = None) -> Node:
    """``x @ W + b`` with ``x``: (B, in), ``W``: (in, out)."""
    xv, Wv = x.value, W.value
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[0]:
        raise ShapeError(f"dense shape mismatch: x {xv.shape}, W {Wv.shape}")
    out = xv @ Wv
    if b is not None:
        out = out + b.value

    def backward(g):
        dx, dW = g @ Wv.T, xv.T @ g
        return (dx, dW) if b is None else (dx, dW, g.sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return _tape_of(x).record(out, "dense", parents, backward)


def batch_norm(
    x: Node,
    gamma: Node,
    beta: Node,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Node:
    """Per-channel batch normalization over axis 1.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as ``momentum * old + (1 - momentum) * new``.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    xv = x.value
    axes = (0,) + tuple(range(2, xv.ndim))
    bshape = (1, -1) + (1,) * (xv.ndim - 2)
    g_ = gamma.value.reshape(bshape)
    if mode == "train":
        n = xv.size // xv.shape[1]
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * (var * n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = g_ * xhat + beta.value.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if mode == "eval":
            return dxhat * inv_std.reshape(bshape), dgamma, dbeta
        m = xv.size // xv.shape[1]
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        dx = inv_std.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return _tape_of(x).record(out, "batch_norm", (x, gamma, beta), backward)


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"logits {z.shape} incompatible with labels {labels.shape}")
    C = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    B = z.shape[0]
    rows = np.arange(B)
    loss = np.mean(lse - shifted[rows, labels])

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / B),)

    return _tape_of(logits).record(np.asarray(loss), "softmax_cross_entropy", (logits,), backward)


# -- gradient oracle --------------------------------------------------------


def relative_error(a, b) -> float:
    """Max over entries of ``|a - b| / max(|a|, |b|, 1e-12)``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numerical_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``.

    With ``coords`` (flat indices) only those entries are filled; the rest
    stay NaN.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan) if coords is not None else np.empty(flat.shape)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(x.shape)


def finite_diff_check(f, x, eps: float = 1e-5, analytic=None, n_coords: int | None = None, rng=None) -> float:
    """Max relative error between an analytic gradient and central differences.

    If ``analytic`` is None, ``f`` must map a tape node to a scalar node and
    the analytic gradient comes from :meth:`Tape.backward`. Otherwise ``f``
    is a plain array -> float function and ``analytic`` its claimed gradient.
    ``n_coords`` restricts the comparison to a random subset of entries.
    """
    x = np.array(x, dtype=DTYPE)
    if analytic is None:
        tape = Tape()
        loss = f(tape.param(x, "x"))
        analytic = tape.backward(loss)["x"]

        def scalar(arr):
            t = Tape()
            return float(f(t.constant(arr)).value)

    else:
        scalar = f
        analytic = np.asarray(analytic, dtype=DTYPE)
    coords = None
    if n_coords is not None and n_coords < x.size:
        rng = np.random.default_rng(rng)
        coords = rng.choice(x.size, size=n_coords, replace=False)
    num = numerical_gradient(scalar, x, eps, coords)
    if coords is None:
        return relative_error(analytic, num)
    return relative_error(analytic.reshape(-1)[coords], num.reshape(-1)[coords])
