"""Minimal reverse-mode automatic differentiation on numpy arrays.

Everything runs in float64. A Tensor wraps an ndarray and remembers how it
was produced; calling ``backward()`` on a scalar walks the graph in reverse
topological order and accumulates ``.grad`` on every tensor that requires
gradients. Only the operations needed by the fusion/counting model exist:
elementwise arithmetic, matmul, 2-D convolution (im2col + BLAS), padding,
bilinear 2x upsampling, channel concat and reductions.
"""

from functools import lru_cache

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # interior grads are not needed once consumed
            if node._parents and node is not self:
                node.grad = None

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum-reduce gradient g back to the given broadcast-source shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def square(a):
    a = as_tensor(a)
    data = a.data * a.data

    def backward(g):
        _accumulate(a, 2.0 * a.data * g)

    return _make(data, (a,), backward)


def sqrt(a):
    """Elementwise square root; the subgradient at 0 is defined as 0."""
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        ga = np.zeros_like(data)
        np.divide(0.5 * g, data, out=ga, where=data > 0)
        _accumulate(a, ga)

    return _make(data, (a,), backward)


def absolute(a):
    a = as_tensor(a)
    data = np.abs(a.data)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return _make(data, (a,), backward)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data
    data = np.where(mask, a.data, b.data)

    def backward(g):
        _accumulate(a, _unbroadcast(g * mask, a.data.shape))
        _accumulate(b, _unbroadcast(g * ~mask, b.data.shape))

    return _make(data, (a, b), backward)


# activations --------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    data = a.data * mask

    def backward(g):
        _accumulate(a, g * mask)

    return _make(data, (a,), backward)


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    data = a.data * scale

    def backward(g):
        _accumulate(a, g * scale)

    return _make(data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    # numerically stable on both tails
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


# shape ops ----------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def narrow_batch(a, i):
    """Select batch element i from an NCHW tensor, keeping the batch axis."""
    a = as_tensor(a)
    data = a.data[i:i + 1]

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[i:i + 1] += g

    return _make(data, (a,), backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            _accumulate(t, g[tuple(idx)])
            offset += s

    return _make(data, tuple(tensors), backward)


# reductions ---------------------------------------------------------------

def tsum(a):
    a = as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a):
    a = as_tensor(a)
    n = a.data.size
    data = np.asarray(a.data.mean())

    def backward(g):
        _accumulate(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _make(data, (a,), backward)


def matmul(a, b):
    """2-D @ 2-D or 2-D @ 1-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        if b.data.ndim == 1:
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)
        else:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward)


# spatial ops (NCHW) -------------------------------------------------------

def pad2d(a, pad, mode="zero"):
    """Pad the two trailing spatial axes. mode is 'zero' or 'replicate'."""
    a = as_tensor(a)
    if pad == 0:
        return a
    n, c, h, w = a.data.shape
    np_mode = {"zero": "constant", "replicate": "edge"}[mode]
    data = np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=np_mode)

    def backward(g):
        if mode == "zero":
            _accumulate(a, g[:, :, pad:h + pad, pad:w + pad])
            return
        # fold replicated borders back onto the edge pixels, rows then cols
        rows = g[:, :, pad:h + pad, :].copy()
        rows[:, :, 0, :] += g[:, :, :pad, :].sum(axis=2)
        rows[:, :, -1, :] += g[:, :, h + pad:, :].sum(axis=2)
        core = rows[:, :, :, pad:w + pad].copy()
        core[:, :, :, 0] += rows[:, :, :, :pad].sum(axis=3)
        core[:, :, :, -1] += rows[:, :, :, w + pad:].sum(axis=3)
        _accumulate(a, core)

    return _make(data, (a,), backward)


def _im2col(x, kh, kw, stride):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(gcols, xshape, kh, kw, stride):
    n, c, h, w = xshape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    g = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros(xshape)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, :, i, j]
    return gx


def conv2d(x, w, b=None, stride=1, pad=0, pad_mode="zero"):
    """2-D convolution of NCHW input with OIHW kernels (cross-correlation).

    Padding is applied symmetrically before a valid convolution; the im2col
    buffer is kept alive for the backward pass.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW kernel")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.data.shape[1]}, kernel expects {w.data.shape[1]}")
    xp = pad2d(x, pad, pad_mode) if pad else x
    cout, cin, kh, kw = w.data.shape
    if xp.data.shape[2] < kh or xp.data.shape[3] < kw:
        raise ValueError("conv2d input smaller than kernel")
    cols, ho, wo = _im2col(xp.data, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    n = xp.data.shape[0]
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)

    parents = (xp, w) if b is None else (xp, w, b)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if w.requires_grad:
            _accumulate(w, (gmat.T @ cols).reshape(w.data.shape))
        if xp.requires_grad:
            _accumulate(xp, _col2im(gmat @ wmat, xp.data.shape, kh, kw, stride))
        if b is not None and b.requires_grad:
            _accumulate(b, gmat.sum(axis=0))

    return _make(out, parents, backward)


@lru_cache(maxsize=64)
def _resize_matrix(n_in, n_out):
    """Dense 1-D linear-interpolation matrix (half-pixel centers)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def _apply_rows(x, m):
    # (N,C,H,W) x (O,H) -> (N,C,O,W)
    y = np.tensordot(m, x, axes=(1, 2))          # (O,N,C,W)
    return np.ascontiguousarray(y.transpose(1, 2, 0, 3))


def _apply_cols(x, m):
    # (N,C,H,W) x (O,W) -> (N,C,H,O)
    return np.tensordot(x, m, axes=(3, 1))


def bilinear_up2(a):
    """Bilinear 2x spatial upsampling (half-pixel alignment)."""
    a = as_tensor(a)
    n, c, h, w = a.data.shape
    mh = _resize_matrix(h, 2 * h)
    mw = _resize_matrix(w, 2 * w)
    data = _apply_cols(_apply_rows(a.data, mh), mw)

    def backward(g):
        _accumulate(a, _apply_cols(_apply_rows(g, mh.T), mw.T))

    return _make(data, (a,), backward)
