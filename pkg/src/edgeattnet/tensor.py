"""Dense float64 tensors with reverse-mode automatic differentiation.

Implements exactly the operations the segmentation networks and losses
need (convolutions, pooling, normalization, attention primitives, a few
elementwise/reduction ops) plus the Adam update. NumPy-backed, CPU only.
Tensor data is treated as immutable once produced by an operation; one
forward/backward graph belongs to one thread.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure numeric forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array that can carry a gradient.

    `grad` is populated by `backward()` on every reachable tensor with
    requires_grad=True and accumulates additively across backward calls
    until reset to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Gradients are accumulated into `.grad` of every tensor in the graph
        that has requires_grad set; calling backward again adds on top.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        flows = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                k = id(parent)
                flows[k] = pg if k not in flows else flows[k] + pg

    # operator sugar; all math lives in module-level functions below
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

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.data.shape),
                            _reduce_to(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_reduce_to(g / b.data, a.data.shape),
                            _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)))


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, a.data.shape),))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log1p(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),))


def absval(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,))


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax over the last dimension; rows sum to 1."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), vjp)


def layernorm_lastdim(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last dimension with per-feature scale/shift."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return _make(out, (a, gamma, beta), vjp)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = _as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an RNG")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra / shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_to(ga, a.data.shape), _reduce_to(gb, b.data.shape)

    return _make(out, (a, b), vjp)


def transpose_last2(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def concat_channels(tensors) -> Tensor:
    """Concatenate B,C,H,W tensors along the channel axis."""
    tensors = [_as_tensor(t) for t in tensors]
    widths = [t.data.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def vjp(g):
        grads, at = [], 0
        for w in widths:
            grads.append(g[:, at:at + w])
            at += w
        return tuple(grads)

    return _make(out, tuple(tensors), vjp)


def flatten_spatial(a: Tensor) -> Tensor:
    """B,C,H,W -> B,(H*W),C token layout."""
    a = _as_tensor(a)
    bb, c, h, w = a.data.shape
    out = a.data.transpose(0, 2, 3, 1).reshape(bb, h * w, c)
    return _make(out, (a,),
                 lambda g: (g.reshape(bb, h, w, c).transpose(0, 3, 1, 2),))


def unflatten_spatial(a: Tensor, h: int, w: int) -> Tensor:
    """Inverse of flatten_spatial: B,(H*W),C -> B,C,H,W."""
    a = _as_tensor(a)
    bb, n, c = a.data.shape
    if n != h * w:
        raise ValueError(f"cannot unflatten {n} tokens to {h}x{w}")
    out = a.data.reshape(bb, h, w, c).transpose(0, 3, 1, 2)
    return _make(out, (a,),
                 lambda g: (g.transpose(0, 2, 3, 1).reshape(bb, n, c),))


def _interp_matrix(n_src: int, n_dst: int) -> np.ndarray:
    # half-pixel-center sampling; exact identity when n_src == n_dst
    x = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    x = np.clip(x, 0.0, n_src - 1.0)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w1 = x - i0
    m = np.zeros((n_dst, n_src))
    m[np.arange(n_dst), i0] += 1.0 - w1
    m[np.arange(n_dst), i1] += w1
    return m


def bilinear_resize(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of a B,C,H,W tensor."""
    a = _as_tensor(a)
    _, _, h, w = a.data.shape
    mr = _interp_matrix(h, out_h)
    mc = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(mr, a.data), mc.T)
    return _make(out, (a,),
                 lambda g: (np.matmul(np.matmul(mr.T, g), mc),))


# ---------------------------------------------------------------------------
# convolution / pooling / batchnorm


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = xd.shape
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    sb, sc, sh, sw = xd.strides
    view = as_strided(xd, (b, c, kh, kw, ho, wo),
                      (sb, sc, sh, sw, sh * stride, sw * stride))
    cols = view.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, b * ho * wo)
    return cols, ho, wo


# forward patch matrices at or below this size are kept for the backward pass;
# larger ones are re-extracted (keeps full-resolution graphs from ballooning)
_COL_CACHE_LIMIT = 96 * 1024 * 1024


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) of B,Cin,H,W with Cout,Cin,k,k."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    b, c, h, w = x.data.shape
    cout, cin, kh, kw = weight.data.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cin}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    out2d = weight.data.reshape(cout, -1) @ cols
    out = np.ascontiguousarray(out2d.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data.reshape(1, cout, 1, 1)
        parents.append(bias)
    keep = cols if cols.nbytes <= _COL_CACHE_LIMIT else None

    def vjp(g):
        g2d = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        cols_b = keep
        if cols_b is None:
            cols_b, _, _ = _im2col(x.data, kh, kw, stride, padding)
        dw = (g2d @ cols_b.T).reshape(weight.data.shape)
        dcols = weight.data.reshape(cout, -1).T @ g2d
        dview = dcols.reshape(c, kh, kw, b, ho, wo)
        hp, wp = h + 2 * padding, w + 2 * padding
        dxp = np.zeros((b, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dview[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, vjp)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 stride-2 transposed convolution: doubles spatial extent.

    Weight layout is Cin,Cout,2,2. Stride equals kernel size, so output
    positions receive exactly one contribution each.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    b, cin, h, w = x.data.shape
    wcin, cout, kh, kw = weight.data.shape
    if cin != wcin:
        raise ValueError(f"conv_transpose2d: input has {cin} channels but weight expects {wcin}")
    if kh != 2 or kw != 2:
        raise ValueError("conv_transpose2d supports only 2x2 kernels with stride 2")
    out = np.empty((b, cout, 2 * h, 2 * w))
    for i in range(2):
        for j in range(2):
            part = np.tensordot(x.data, weight.data[:, :, i, j], axes=([1], [0]))
            out[:, :, i::2, j::2] = part.transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)
        parents.append(bias)

    def vjp(g):
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(weight.data)
        for i in range(2):
            for j in range(2):
                gsub = g[:, :, i::2, j::2]
                dx += np.tensordot(gsub, weight.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                dw[:, :, i, j] = np.tensordot(x.data, gsub, axes=([0, 2, 3], [0, 2, 3]))
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, vjp)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient routes to the first maximum in row-major window order."""
    x = _as_tensor(x)
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = (x.data.reshape(b, c, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(b, c, h // 2, w // 2, 4))
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = (dwin.reshape(b, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(b, c, h, w))
        return (dx,)

    return _make(out, (x,), vjp)


def batchnorm2d(x: Tensor, gamma: Tensor | None, beta: Tensor | None,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over B,H,W.

    Training mode normalizes with batch statistics (biased variance) and
    updates running stats in place (unbiased variance, torch convention).
    Eval mode normalizes with the running stats. gamma/beta are optional
    learnable scale/shift.
    """
    x = _as_tensor(x)
    b, c, h, w = x.data.shape
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = b * h * w
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma = _as_tensor(gamma)
        out = out * gamma.data.reshape(1, c, 1, 1)
        parents.append(gamma)
    if beta is not None:
        beta = _as_tensor(beta)
        out = out + beta.data.reshape(1, c, 1, 1)
        parents.append(beta)

    def vjp(g):
        dxhat = g * gamma.data.reshape(1, c, 1, 1) if gamma is not None else g
        inv4 = inv.reshape(1, c, 1, 1)
        if training:
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            dx = inv4 * (dxhat - m1 - xhat * m2)
        else:
            dx = dxhat * inv4
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=axes))
        if beta is not None:
            grads.append(g.sum(axis=axes))
        return tuple(grads)

    return _make(out, parents, vjp)


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class Parameter:
    """Named learnable tensor; names are unique within a model."""
    name: str
    tensor: Tensor

    @property
    def count(self) -> int:
        return self.tensor.data.size


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update applied in place to `params` (name -> Tensor).

    Uses the equivalent reformulation p -= (lr*sqrt(c2)/c1) * m / (sqrt(v) +
    eps*sqrt(c2)) to avoid materializing the bias-corrected moments.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    step_size = lr * math.sqrt(c2) / c1
    eps_hat = eps * math.sqrt(c2)
    for name, p in params.items():
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        g = p.grad
        m *= beta1
        v *= beta2
        if g is not None:
            m += (1.0 - beta1) * g
            v += (1.0 - beta2) * np.square(g)
        denom = np.asarray(np.sqrt(v))
        denom += eps_hat
        denom = np.divide(m, denom, out=denom)
        denom *= step_size
        p.data = p.data - denom
