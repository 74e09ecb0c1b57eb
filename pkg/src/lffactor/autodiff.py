"""Minimal reverse-mode autodiff over dense rank-4 tensors.

Provides exactly the operations the layer-synthesis networks and their
training loss need: 2D convolution, 2x2 stride-2 transposed convolution,
2x2 max pooling, ReLU, channel concatenation, MSE, an out-of-range
penalty, plus the Adam optimizer and Kaiming-uniform initialization.

The graph is an implicit tape: every op node carries a monotonically
increasing id, and backward visits reachable nodes in strictly decreasing
id order (reverse construction order). One backward per forward; a fresh
graph is built per training step.
"""

from __future__ import annotations

import itertools

import numpy as np

_node_counter = itertools.count()

# Toggled by no_grad(); when False ops produce leaf tensors with no tape.
_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array plus gradient accumulator and tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_node_id", "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward_fn = None
        self._node_id = next(_node_counter)
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Generic combination ops: loss assembly and per-channel bias addition.
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other))
        a_shape, b_shape = self.data.shape, other.data.shape

        def bwd(g, out):
            return (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))

        return make_op(self.data + other.data, (self, other), bwd)

    def __mul__(self, scale):
        s = float(scale)

        def bwd(g, out):
            return (g * s,)

        return make_op(self.data * s, (self,), bwd)

    __rmul__ = __mul__


def _unbroadcast(g, shape):
    """Reduce an upstream gradient back to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {opname}")


def make_op(data, parents, backward_fn, opname="op"):
    """Register a graph node.

    ``backward_fn(upstream_grad, out)`` returns one gradient array (or
    None) per parent. Skipped entirely under no_grad or when no parent
    needs gradients.
    """
    _check_finite(data, opname)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss):
    """Populate gradients of every requires_grad tensor reachable from loss.

    ``loss`` must be a scalar node; calling backward twice on the same
    node is an error (fresh graph per step).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already ran on this graph; build a fresh one")
    loss._backward_done = True

    # Reverse construction order over the reachable subgraph.
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node_id in nodes:
            continue
        nodes[t._node_id] = t
        stack.extend(t._parents)

    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad[...] = 1.0

    for node_id in sorted(nodes, reverse=True):
        t = nodes[node_id]
        if t._backward_fn is None or t.grad is None:
            continue
        grads = t._backward_fn(t.grad, t)
        for parent, g in zip(t._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, k, pad):
    """(n,c,h,w) -> patch view (n, c*k*k, h*w) for a size-preserving conv."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, h, w), (s[0], s[1], s[2], s[3], s[2], s[3]))
    return np.ascontiguousarray(view).reshape(n, c * k * k, h * w)


def _conv_forward(x, kernel, bias, pad):
    n, c, h, w = x.shape
    co, ci, k, _ = kernel.shape
    cols = _im2col(x, k, pad)
    out = np.matmul(kernel.reshape(co, ci * k * k), cols)
    if bias is not None:
        out += bias.reshape(1, co, 1)
    return out.reshape(n, co, h, w), cols


def conv2d(x, kernel, bias, padding=None):
    """Size-preserving 2D convolution with per-output-channel bias.

    kernel is (c_out, c_in, k, k) with k odd (or 1); padding defaults to
    (k-1)//2 so spatial size is preserved.
    """
    co, ci, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if ci != x.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {ci}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ValueError("only size-preserving padding (k-1)//2 is supported")
    if bias.data.shape != (co,):
        raise ValueError(f"bias must have shape ({co},)")

    out, cols = _conv_forward(x.data, kernel.data, bias.data, padding)
    n, _, h, w = x.shape

    def bwd(g, _out):
        gm = g.reshape(n, co, h * w)
        grad_k = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.data.shape)
        grad_b = g.sum(axis=(0, 2, 3))
        # Input gradient is the correlation of g with the flipped, transposed kernel.
        kt = np.ascontiguousarray(kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        grad_x, _ = _conv_forward(g, kt, None, padding)
        return (grad_x, grad_k, grad_b)

    return make_op(out, (x, kernel, bias), bwd, "conv2d")


def conv_transpose2d(x, kernel):
    """Stride-2 2x2 transposed convolution: (n,ci,h,w) -> (n,co,2h,2w).

    kernel is (c_in, c_out, 2, 2); exact adjoint of the stride-2 2x2
    convolution with the same kernel.
    """
    n, ci, h, w = x.shape
    ki, co, kh, kw = kernel.shape
    if (kh, kw) != (2, 2):
        raise ValueError("kernel must be 2x2")
    if ki != ci:
        raise ValueError(f"channel mismatch: input has {ci}, kernel expects {ki}")

    # tensordot keeps these on the BLAS path
    t = np.tensordot(x.data, kernel.data, axes=([1], [0]))  # (n,h,w,co,2,2)
    out = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2, 5)).reshape(n, co, 2 * h, 2 * w)

    def bwd(g, _out):
        gv = g.reshape(n, co, h, 2, w, 2)
        grad_x = np.tensordot(gv, kernel.data,
                              axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_k = np.tensordot(x.data, gv, axes=([0, 2, 3], [0, 2, 4]))
        return (np.ascontiguousarray(grad_x), grad_k)

    return make_op(out, (x, kernel), bwd, "conv_transpose2d")


def maxpool2x2(x):
    """2x2 max pooling; gradient goes to the first row-major maximum."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g, _out):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        grad_x = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (grad_x.reshape(n, c, h, w),)

    return make_op(out, (x,), bwd, "maxpool2x2")


def relu(x):
    """Elementwise max(x, 0); derivative at exactly 0 is 0."""
    mask = x.data > 0

    def bwd(g, _out):
        return (g * mask,)

    return make_op(np.maximum(x.data, 0), (x,), bwd, "relu")


def concat_channels(a, b):
    """Concatenate along the channel axis, a first."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def bwd(g, _out):
        return (g[:, :ca], g[:, ca:])

    return make_op(np.concatenate([a.data, b.data], axis=1), (a, b), bwd, "concat")


def mse_loss(pred, target):
    """Mean over all elements of (pred - target)^2, as a scalar node."""
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tdata.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {tdata.shape}")
    diff = pred.data - tdata
    n = diff.size
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def bwd(g, _out):
        base = (2.0 / n) * diff * g
        return (base, -base) if len(parents) == 2 else (base,)

    return make_op(np.array(np.mean(diff * diff)), parents, bwd, "mse_loss")


def range_penalty(x):
    """Mean of max(0, v-1)^2 + max(0, -v)^2; zero iff all values in [0,1]."""
    over = np.maximum(x.data - 1.0, 0.0)
    under = np.maximum(-x.data, 0.0)
    n = x.data.size

    def bwd(g, _out):
        return ((2.0 / n) * (over - under) * g,)

    return make_op(np.array(np.mean(over * over + under * under)), (x,), bwd,
                   "range_penalty")


def tsum(x):
    """Sum of all elements, as a scalar node."""

    def bwd(g, _out):
        return (np.full_like(x.data, float(g)),)

    return make_op(np.array(x.data.sum()), (x,), bwd, "sum")


# ---------------------------------------------------------------------------
# optimizer and initialization


class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, state):
    """One Adam update with bias correction; zeroes gradients afterwards."""
    if len(params) != len(state.m):
        raise ValueError("parameter count does not match optimizer state")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError("state/parameter shape mismatch")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()


def kaiming_init(shape, rng, fan_in=None, dtype=np.float32):
    """Kaiming-uniform init: i.i.d. uniform on (-b, b), b = sqrt(6/fan_in).

    fan_in defaults to prod(shape[1:]), i.e. c_in*k*k for a (c_out, c_in,
    k, k) convolution kernel; transposed-conv kernels pass it explicitly.
    """
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
