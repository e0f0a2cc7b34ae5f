"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the primitives the search space and the towers need are provided. Each
primitive computes its forward value eagerly and, when any input takes part
in differentiation, records a closure that pushes the upstream gradient back
to its inputs. ``Tensor.backward`` walks the recorded graph in reverse
topological order.

Gradients accumulate: calling ``backward`` twice without zeroing adds the
second pass onto the first.
"""
import math

import numpy as np

from . import kernels

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = []
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

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
            # interior gradients are transient; leaves keep theirs
            node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A leaf tensor updated by the optimizer.

    ``decay`` says whether weight decay applies to it.
    """

    __slots__ = ("learnable", "decay", "velocity")

    def __init__(self, data, name=None, learnable=True, decay=True):
        super().__init__(data, requires_grad=learnable, name=name)
        self.learnable = learnable
        self.decay = decay
        self.velocity = None


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------

def add(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), backward)


def add_n(tensors):
    """Sum of equally shaped tensors, accumulated left to right."""
    if not tensors:
        raise ValueError("add_n of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data

    def backward(g):
        for t in tensors:
            if t.requires_grad:
                t._accumulate(g)
    return _result(total, tensors, backward)


def mul(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), backward)


def scale(x, c):
    def backward(g):
        x._accumulate(g * c)
    return _result(x.data * c, (x,), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)
    return _result(x.data * mask, (x,), backward)


def total(x):
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))
    return _result(x.data.sum(), (x,), backward)


def mean(x):
    n = x.data.size

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))
    return _result(x.data.mean(), (x,), backward)


def l2norm(x):
    """Euclidean norm; the subgradient at zero is taken as zero."""
    value = math.sqrt(float(np.dot(x.data.ravel(), x.data.ravel())))

    def backward(g):
        if value > 0.0:
            x._accumulate(g * x.data / value)
    return _result(value, (x,), backward)


def gate_scale(x, w, factor):
    """``factor * x`` where ``factor`` is a step+saw function of the scalar ``w``.

    The step part is flat and the saw part has slope 1, so the gradient that
    reaches ``w`` is ``sum(x * upstream)``.
    """
    def backward(g):
        if x.requires_grad:
            x._accumulate(g * factor)
        if w.requires_grad:
            w._accumulate(np.full(w.shape, float((g * x.data).sum())))
    return _result(x.data * factor, (x, w), backward)


def weighted_ratio(weights, sizes, factors, total_size):
    """``sum(sizes * factors) / total_size`` with d/dw_j = sizes_j / total_size.

    ``factors`` are the step+saw values of ``weights``; the sum is exactly
    rounded so the value is independent of summation order.
    """
    value = math.fsum(s * f for s, f in zip(sizes, factors)) / total_size

    def backward(g):
        for w, s in zip(weights, sizes):
            if w.requires_grad:
                w._accumulate(np.full(w.shape, float(g) * s / total_size))
    return _result(value, tuple(weights), backward)


def stack(scalars):
    data = np.array([float(s.data) for s in scalars])

    def backward(g):
        for i, s in enumerate(scalars):
            if s.requires_grad:
                s._accumulate(np.full(s.shape, g[i]))
    return _result(data, scalars, backward)


# --------------------------------------------------------------------------
# convolution, pooling, normalization
# --------------------------------------------------------------------------

def _pad(x, pad, value=0.0):
    if pad == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * pad, w + 2 * pad), value)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _out_size(h, k, stride, pad, dil):
    return (h + 2 * pad - dil * (k - 1) - 1) // stride + 1


def depthwise_conv(x, w, stride=1, pad=0, dilation=1):
    """Per-channel convolution; ``w`` has shape (C, k, k)."""
    n, c, h, wd = x.shape
    if w.shape[0] != c:
        raise ValueError(f"depthwise weight has {w.shape[0]} channels, input has {c}")
    k = w.shape[1]
    ho = _out_size(h, k, stride, pad, dilation)
    wo = _out_size(wd, k, stride, pad, dilation)
    xp = np.ascontiguousarray(_pad(x.data, pad))
    out = kernels.dw_forward(xp, w.data, stride, dilation, ho, wo)

    def backward(g):
        gxp, gw = kernels.dw_backward(xp, w.data, g, stride, dilation)
        if x.requires_grad:
            x._accumulate(gxp[:, :, pad:pad + h, pad:pad + wd])
        if w.requires_grad:
            w._accumulate(gw)
    return _result(out, (x, w), backward)


def pointwise_conv(x, w, stride=1):
    """1x1 convolution; ``w`` has shape (C_out, C_in). Stride subsamples first."""
    n, c, h, wd = x.shape
    if w.shape[1] != c:
        raise ValueError(f"pointwise weight expects {w.shape[1]} channels, input has {c}")
    xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
    ho, wo = xs.shape[2], xs.shape[3]
    flat = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    out = np.matmul(w.data, flat).reshape(n, w.shape[0], ho, wo)

    def backward(g):
        gflat = g.reshape(n, w.shape[0], ho * wo)
        if w.requires_grad:
            w._accumulate(np.tensordot(gflat, flat, axes=([0, 2], [0, 2])))
        if x.requires_grad:
            gx = np.matmul(w.data.T, gflat).reshape(n, c, ho, wo)
            if stride > 1:
                full = np.zeros(x.shape)
                full[:, :, ::stride, ::stride] = gx
                gx = full
            x._accumulate(gx)
    return _result(out, (x, w), backward)


def conv2d(x, w, pad=1):
    """Dense stride-1 convolution; ``w`` has shape (C_out, C_in, k, k)."""
    n, c, h, wd = x.shape
    cout, cin, k, _ = w.shape
    if cin != c:
        raise ValueError(f"conv weight expects {cin} channels, input has {c}")
    ho = _out_size(h, k, 1, pad, 1)
    wo = _out_size(wd, k, 1, pad, 1)
    xp = _pad(x.data, pad)
    out = np.zeros((n, cout, ho * wo))
    cols = []
    for p in range(k):
        for q in range(k):
            col = np.ascontiguousarray(xp[:, :, p:p + ho, q:q + wo]).reshape(n, c, ho * wo)
            cols.append(col)
            out += np.matmul(w.data[:, :, p, q], col)
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        gflat = g.reshape(n, cout, ho * wo)
        gxp = np.zeros(xp.shape)
        gw = np.zeros(w.shape)
        idx = 0
        for p in range(k):
            for q in range(k):
                if w.requires_grad:
                    gw[:, :, p, q] = np.tensordot(gflat, cols[idx], axes=([0, 2], [0, 2]))
                if x.requires_grad:
                    gxp[:, :, p:p + ho, q:q + wo] += np.matmul(w.data[:, :, p, q].T, gflat).reshape(n, c, ho, wo)
                idx += 1
        if w.requires_grad:
            w._accumulate(gw)
        if x.requires_grad:
            x._accumulate(gxp[:, :, pad:pad + h, pad:pad + wd])
    return _result(out, (x, w), backward)


def max_pool3(x, stride=1):
    n, c, h, wd = x.shape
    ho = _out_size(h, 3, stride, 1, 1)
    wo = _out_size(wd, 3, stride, 1, 1)
    xp = np.ascontiguousarray(_pad(x.data, 1, -np.inf))
    out, arg = kernels.maxpool_forward(xp, stride, ho, wo)

    def backward(g):
        gxp = kernels.maxpool_backward(arg, g, stride, h + 2, wd + 2)
        x._accumulate(gxp[:, :, 1:1 + h, 1:1 + wd])
    return _result(out, (x,), backward)


def avg_pool3(x, stride=1):
    """3x3 average with zero padding counted in the divisor (always 9)."""
    n, c, h, wd = x.shape
    ho = _out_size(h, 3, stride, 1, 1)
    wo = _out_size(wd, 3, stride, 1, 1)
    xp = np.ascontiguousarray(_pad(x.data, 1))
    out = kernels.avgpool_forward(xp, stride, ho, wo)

    def backward(g):
        gxp = kernels.avgpool_backward(g, stride, h + 2, wd + 2)
        x._accumulate(gxp[:, :, 1:1 + h, 1:1 + wd])
    return _result(out, (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel standardization over (N, H, W) with learned scale/shift.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, like the usual convention).
    """
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx_hat = g * gamma.data[None, :, None, None]
            if training:
                gx = (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                      - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
                gx *= inv[None, :, None, None]
            else:
                gx = gx_hat * inv[None, :, None, None]
            x._accumulate(gx)
    return _result(out, (x, gamma, beta), backward)


def global_avg_pool(x):
    n, c, h, wd = x.shape

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape))
    return _result(x.data.mean(axis=(2, 3)), (x,), backward)


def linear(x, w, b):
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    def backward(g):
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ w.data)
    return _result(x.data @ w.data.T + b.data, (x, w, b), backward)


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the labelled class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n < 1:
        raise ValueError("cross_entropy needs at least one sample")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    value = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g * p / n)
    return _result(value, (logits,), backward)


def drop_path(x, p, training, rng):
    """Zero whole samples with probability ``p`` and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop-path probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape[0]) >= p).astype(DTYPE) / (1.0 - p)
    mask = keep.reshape((-1,) + (1,) * (x.data.ndim - 1))

    def backward(g):
        x._accumulate(g * mask)
    return _result(x.data * mask, (x,), backward)
