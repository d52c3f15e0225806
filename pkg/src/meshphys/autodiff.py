"""A small reverse-mode differentiation core over numpy arrays.

It covers exactly what the MeshPhys network and its objective need: channel
mixing, depthwise temporal convolution, batch normalisation, gating softmax,
fixed sparse/dense propagation along the node axis, fixed linear filters along
time, and a handful of elementwise and reduction ops.  Each op records a
closure that maps the output gradient to gradients for its parents.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # --- metadata
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # --- arithmetic sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    # --- reverse pass
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, name=name, dtype=dtype)
        self.trainable = trainable


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    dtype = a.dtype if isinstance(a, Tensor) else (b.dtype if isinstance(b, Tensor) else None)
    return as_tensor(a, dtype), as_tensor(b, dtype)


# ------------------------------------------------------------ elementwise ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * pos,))


# ----------------------------------------------------------- shape / reduce

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(out, (x,), back)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = range(x.ndim) if axis is None else ((axis,) if np.isscalar(axis) else axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)
    return _result(x.data[idx], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.moveaxis(g, axis, 0)))


def roll(x: Tensor, shift: int, axis: int = -1) -> Tensor:
    return _result(np.roll(x.data, shift, axis=axis), (x,),
                   lambda g: (np.roll(g, -shift, axis=axis),))


def circular_shifts(x: Tensor, shifts: Sequence[int]) -> Tensor:
    """Stack circular shifts of the last axis: (..., T) -> (..., S, T), out[..., s, :] = roll(x, shifts[s])."""
    t = x.shape[-1]
    shifts = np.asarray(shifts, dtype=np.int64)
    base = np.arange(t)
    idx = (base[None, :] - shifts[:, None]) % t
    inv = (base[None, :] + shifts[:, None]) % t
    rows = np.arange(len(shifts))[:, None]
    return _result(x.data[..., idx], (x,), lambda g: (g[..., rows, inv].sum(axis=-2),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the (time, node) axes of a B x C x T x N tensor -> B x C."""
    return tmean(x, axis=(2, 3))


# ------------------------------------------------------------ network ops

def pointwise_linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution: mixes channels of a B x C_in x T x N tensor with ``W`` (C_out x C_in)."""
    B, cin, T, N = x.shape
    if W.shape[1] != cin:
        raise ValueError(f"weight expects {W.shape[1]} input channels, got {cin}")
    cout = W.shape[0]
    xf = x.data.reshape(B, cin, T * N)
    y = np.matmul(W.data, xf)
    if b is not None:
        y += b.data[None, :, None]
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        gf = g.reshape(B, cout, T * N)
        gx = np.matmul(W.data.T, gf).reshape(x.shape) if x.requires_grad else None
        gW = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0) if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, gf.sum(axis=(0, 2))
    return _result(y.reshape(B, cout, T, N), parents, back)


def depthwise_temporal_conv(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel 1D correlation along time with zero 'same' padding; ``kernels`` is C x k.

    ``y[b, c, t, n] = sum_j K[c, j] x[b, c, t + j - k // 2, n]``, shared across nodes.
    """
    B, C, T, N = x.shape
    k = kernels.shape[1]
    if k % 2 == 0:
        raise ValueError("temporal kernel size must be odd")
    if kernels.shape[0] != C:
        raise ValueError("one kernel per channel required")
    h = k // 2
    K = kernels.data
    y = np.empty_like(x.data)
    for c in range(C):
        ndimage.correlate1d(x.data[:, c], K[c], axis=1, output=y[:, c], mode="constant")

    def back(g):
        gx = gK = None
        if x.requires_grad:
            gx = np.empty_like(g)
            for c in range(C):
                ndimage.convolve1d(g[:, c], K[c], axis=1, output=gx[:, c], mode="constant")
        if kernels.requires_grad:
            xp = np.zeros((B, C, T + 2 * h, N), dtype=x.dtype)
            xp[:, :, h:h + T] = x.data
            gK = np.empty_like(K)
            for j in range(k):
                gK[:, j] = np.einsum("bctn,bctn->c", g, xp[:, :, j:j + T])
        return gx, gK
    return _result(y, (x, kernels), back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None, training: bool = True,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (batch, time, node) of a B x C x T x N tensor.

    In training mode batch statistics are used and the running buffers (if
    given) are updated in place; in eval mode the running buffers are used.
    """
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            m = x.data.size // x.shape[1]
            unbiased = var * (m / max(m - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
    y = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def back(g):
        gb = g.sum(axis=axes)
        gg = np.einsum("bctn,bctn->c", g, xhat)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv).reshape(shape)
            if training:
                m = x.data.size // x.shape[1]
                gx = scale * (g - (gb / m).reshape(shape) - xhat * (gg / m).reshape(shape))
            else:
                gx = scale * g
        return gx, gg, gb
    return _result(y, (x, gamma, beta), back)


def _as_operator(matrix):
    if sp.issparse(matrix):
        m = sp.csr_array(matrix)
        return m, sp.csr_array(m.T)
    m = np.asarray(matrix)
    return m, m.T


def node_matmul(x: Tensor, matrix) -> Tensor:
    """Apply a fixed K x N matrix along the last (node) axis: y[..., k] = sum_n M[k, n] x[..., n]."""
    M, MT = _as_operator(matrix)
    n = x.shape[-1]
    if M.shape[1] != n:
        raise ValueError(f"matrix has {M.shape[1]} columns but tensor has {n} nodes")
    lead = x.shape[:-1]

    def apply(op, arr, rows):
        if sp.issparse(op):
            flat = arr.reshape(-1, arr.shape[-1])
            out = (op @ flat.T).T
            return np.ascontiguousarray(out, dtype=arr.dtype).reshape(lead + (rows,))
        return np.matmul(arr, op.T.astype(arr.dtype, copy=False))

    y = apply(M, x.data, M.shape[0])
    return _result(y, (x,), lambda g: (apply(MT, g, n),))


def sparse_propagate(x: Tensor, propagation) -> Tensor:
    """Graph propagation with a fixed, non-trainable N x N matrix (e.g. normalised adjacency)."""
    return node_matmul(x, propagation)


def temporal_matmul(x: Tensor, matrix: np.ndarray) -> Tensor:
    """Apply a fixed T' x T matrix along the time axis (axis -2) of a (..., T, N) tensor."""
    M = np.asarray(matrix).astype(x.dtype, copy=False)
    return _result(np.matmul(M, x.data), (x,), lambda g: (np.matmul(M.T, g),))


def node_conv1d(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """1D convolution over the node axis (kernel 3, zero padding); ``W`` is C_out x C_in x 3."""
    B, cin, T, N = x.shape
    cout, _, k = W.shape
    h = k // 2
    xp = np.zeros((B, cin, T, N + 2 * h), dtype=x.dtype)
    xp[..., h:h + N] = x.data
    slabs = [np.ascontiguousarray(xp[..., j:j + N]).reshape(B, cin, T * N) for j in range(k)]
    y = np.zeros((B, cout, T * N), dtype=x.dtype)
    for j in range(k):
        y += np.matmul(W.data[:, :, j], slabs[j])
    if b is not None:
        y += b.data[None, :, None]
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        gf = g.reshape(B, cout, T * N)
        gx = gW = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[..., j:j + N] += np.matmul(W.data[:, :, j].T, gf).reshape(B, cin, T, N)
            gx = gp[..., h:h + N]
        if W.requires_grad:
            gW = np.stack([np.matmul(gf, s.transpose(0, 2, 1)).sum(axis=0) for s in slabs], axis=2)
        if b is None:
            return gx, gW
        return gx, gW, gf.sum(axis=(0, 2))
    return _result(y.reshape(B, cout, T, N), parents, back)


def pearson(a: Tensor, b: Tensor, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Pearson correlation along ``axis`` with broadcasting over the other axes.

    Returns ``(rho, degenerate)``; where either input has zero variance the
    correlation is defined as 0 with zero gradient and ``degenerate`` is True.
    """
    a, b = _pair(a, b)
    ac = a.data - a.data.mean(axis=axis, keepdims=True)
    bc = b.data - b.data.mean(axis=axis, keepdims=True)
    cov = (ac * bc).sum(axis=axis, keepdims=True)
    va = (ac * ac).sum(axis=axis, keepdims=True)
    vb = (bc * bc).sum(axis=axis, keepdims=True)
    denom = np.sqrt(va * vb)
    degenerate = denom <= 0
    safe = np.where(degenerate, 1.0, denom)
    rho = np.where(degenerate, 0.0, cov / safe)
    va_s = np.where(va > 0, va, 1.0)
    vb_s = np.where(vb > 0, vb, 1.0)

    def back(g):
        g = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            ga = np.where(degenerate, 0.0, g * (bc / safe - rho * ac / va_s))
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.where(degenerate, 0.0, g * (ac / safe - rho * bc / vb_s))
            gb = _unbroadcast(gb, b.shape)
        return ga, gb
    out = _result(np.squeeze(rho, axis=axis).astype(a.dtype, copy=False), (a, b), back)
    return out, np.squeeze(degenerate, axis=axis)


# --------------------------------------------------------- gradient checker

def _central_difference(fn, flat, i, eps, f0, refinements: int = 3) -> float:
    # if the one-sided slopes disagree, a kink lies inside the stencil; shrink the step
    old = flat[i]
    for _ in range(refinements + 1):
        flat[i] = old + eps
        fp = float(fn().data)
        flat[i] = old - eps
        fm = float(fn().data)
        flat[i] = old
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        if abs(fwd - bwd) <= 1e-3 * max(abs(fwd), abs(bwd)) + 1e-6:
            break
        eps /= 10.0
    return (fp - fm) / (2 * eps)


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0, floor: float = 1e-3) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``fn`` must rebuild the computation from ``inputs`` on every call and
    return a scalar.  Per input, the error is ``max|analytic - numeric|``
    divided by the larger of the two gradients' max-norms, itself floored at
    ``floor`` times the largest gradient seen over all inputs (inputs whose
    true gradient is exactly zero, such as biases feeding a normalisation,
    would otherwise compare rounding noise with rounding noise).  With
    ``max_coords`` only a random subset of coordinates is probed per input.
    Coordinates whose one-sided slopes disagree (a ReLU kink inside the
    stencil) are re-estimated with progressively smaller steps.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    f0 = float(out.data)
    rng = np.random.default_rng(seed)
    pairs = []
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            num = np.zeros(len(coords))
            for j, i in enumerate(coords):
                num[j] = _central_difference(fn, flat, i, eps, f0)
            pairs.append((ga.reshape(-1)[coords], num))
    peak = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs),
               default=0.0)
    worst = 0.0
    for an, num in pairs:
        scale = max(np.abs(an).max(initial=0.0), np.abs(num).max(initial=0.0), floor * peak)
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(an - num).max() / scale))
    return worst
