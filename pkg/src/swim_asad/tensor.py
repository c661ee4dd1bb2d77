"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations needed by the short-window CNN and the Mamba backbone are
provided. Every op accepts leading batch dimensions so that minibatches run
as single numpy calls.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the default float type (64-bit is used for grad checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        dtype = dtype or _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Wrap an op result; the graph edge is kept only if some parent needs grad."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad.

    Intermediate adjoints live only for the duration of the pass, so calling
    backward twice on the same graph accumulates exactly twice the leaf grads.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    adj = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adj[key] = adj[key] + pg if key in adj else pg


# ---------------------------------------------------------------------------
# basic algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return Tensor.from_op(a.data[idx], (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), Tensor(1.0 / n, dtype=a.dtype))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(out, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------

def conv_time(x: Tensor, kernel: Tensor, bias: Optional[Tensor], pad_left: int, pad_right: int) -> Tensor:
    """Full-height temporal convolution (cross-correlation).

    x: [..., C, T], kernel: [F, C, K], bias: [F]  ->  [..., F, T + pad_left + pad_right - K + 1]
    """
    if x.ndim < 2 or kernel.ndim != 3:
        raise ShapeError(f"conv_time expects x [..., C, T] and kernel [F, C, K]; got {x.shape}, {kernel.shape}")
    F, C, K = kernel.shape
    if x.shape[-2] != C:
        raise ShapeError(f"conv_time channel mismatch: x has {x.shape[-2]} channels, kernel expects {C}")
    T = x.shape[-1]
    t_out = T + pad_left + pad_right - K + 1
    if t_out < 1:
        raise ShapeError(f"kernel length {K} exceeds padded input length {T + pad_left + pad_right}")
    widths = [(0, 0)] * (x.ndim - 1) + [(pad_left, pad_right)]
    xp = np.pad(x.data, widths)
    lead = x.shape[:-2]
    # im2col as [..., t_out, C*K]; explicit matmuls rather than einsum(optimize=True),
    # whose contraction plan (and so float rounding) varies with the string hash seed
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=-1)  # [..., C, t_out, K]
    cols = np.ascontiguousarray(np.moveaxis(cols, -3, -2)).reshape(lead + (t_out, C * K))
    w = kernel.data.reshape(F, C * K)
    out = np.swapaxes(cols @ w.T, -1, -2)
    if bias is not None:
        out = out + bias.data[:, None]

    def bw(g):
        gk = None
        if kernel.requires_grad:
            g2 = np.swapaxes(g.reshape(-1, F, t_out), 0, 1).reshape(F, -1)
            gk = (g2 @ cols.reshape(-1, C * K)).reshape(F, C, K)
        gb = g.sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k:k + t_out] += kernel.data[:, :, k].T @ g
            gx = gxp[..., pad_left:pad_left + T]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor.from_op(out, parents, bw)


class RunningStats:
    """Exponential moving averages of per-feature mean and variance."""

    def __init__(self, n_features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        dtype = dtype or _DEFAULT_DTYPE
        self.mean = np.zeros(n_features, dtype=dtype)
        self.var = np.ones(n_features, dtype=dtype)
        self.num_batches = 0
        self.momentum = momentum
        self.eps = eps

    def update(self, mu: np.ndarray, var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * mu).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * var_unbiased).astype(self.var.dtype)
        self.num_batches += 1


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool) -> Tensor:
    """Per-feature normalization of x [..., F, T] over every axis except the feature axis."""
    if x.ndim < 2 or x.shape[-2] != gamma.shape[0]:
        raise ShapeError(f"batchnorm expects [..., {gamma.shape[0]}, T], got {x.shape}")
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)
    if training:
        n = int(np.prod([x.shape[i] for i in axes]))
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.update(mu, var * n / max(n - 1, 1))
    else:
        if stats.num_batches == 0:
            raise RuntimeError("batchnorm in eval mode before running statistics were ever updated")
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + stats.eps)
    xhat = (x.data - mu[:, None]) * inv[:, None]
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data[:, None]
        if training:
            gx = inv[:, None] * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True).reshape(gxhat.shape[-2], 1)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True).reshape(gxhat.shape[-2], 1)
            )
        else:
            gx = gxhat * inv[:, None]
        return gx, ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ W.T + b over the trailing dimension."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input trailing dim {x.shape[-1]} does not match weight {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ W.data if x.requires_grad else None
        gW = None
        if W.requires_grad:
            gW = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if b is None:
            return gx, gW
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return Tensor.from_op(out, parents, bw)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, v).astype(v.dtype, copy=False)


def elementwise(x: Tensor, kind: str) -> Tensor:
    v = x.data
    if kind == "relu":
        out = np.maximum(v, 0)
        deriv = lambda: (v > 0).astype(v.dtype)
    elif kind == "sigmoid":
        out = _sigmoid(v)
        deriv = lambda: out * (1 - out)
    elif kind == "silu":
        s = _sigmoid(v)
        out = v * s
        deriv = lambda: s * (1 + v * (1 - s))
    elif kind == "softplus":
        out = _softplus(v)
        deriv = lambda: _sigmoid(v)
    elif kind == "exp":
        out = np.exp(v)
        deriv = lambda: out
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return Tensor.from_op(out, (x,), lambda g: (g * deriv(),))


def relu(x: Tensor) -> Tensor:
    return elementwise(x, "relu")


def silu(x: Tensor) -> Tensor:
    return elementwise(x, "silu")


def softplus(x: Tensor) -> Tensor:
    return elementwise(x, "softplus")


def texp(x: Tensor) -> Tensor:
    return elementwise(x, "exp")


def mean_over_time(x: Tensor) -> Tensor:
    """Average over the last axis; [..., F, T] -> [..., F]."""
    T = x.shape[-1] if x.ndim else 0
    if T == 0:
        raise ShapeError("mean_over_time needs at least one time step")
    out = x.data.mean(axis=-1)

    def bw(g):
        return (np.broadcast_to(g[..., None] / T, x.shape).astype(x.dtype),)

    return Tensor.from_op(out, (x,), bw)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    xn = x.data * r
    out = xn * weight.data

    def bw(g):
        gw = (g * xn).reshape(-1, x.shape[-1]).sum(axis=0)
        gxn = g * weight.data
        gx = r * (gxn - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        return gx, gw

    return Tensor.from_op(out, (x, weight), bw)


def log_softmax(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    z = v - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(v: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(v)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over all leading positions."""
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("non-finite logits")
    lsm = log_softmax(logits.data)
    flat = lsm.reshape(-1, K)
    lab = labels.reshape(-1).astype(np.int64)
    n = flat.shape[0]
    loss = -flat[np.arange(n), lab].mean()

    def bw(g):
        p = np.exp(flat)
        p[np.arange(n), lab] -= 1.0
        return ((g / n) * p).reshape(logits.shape).astype(logits.dtype),

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    return grad_check_params(lambda: f(point), [point], eps)


def grad_check_params(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Finite-difference check of every (or a random subset of) coordinate of ``params``.

    ``f`` must rebuild the graph on each call and read the parameters' ``.data``
    in place; coordinates are perturbed by +-eps.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise ValueError("non-finite value at grad-check point")
        p.requires_grad = True
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data):
        raise ValueError("non-finite function value at grad-check point")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            if not np.isfinite(num):
                raise ValueError("non-finite finite-difference estimate")
            err = abs(float(analytic.reshape(-1)[i]) - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
