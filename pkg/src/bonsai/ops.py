"""Edge operations, tower pieces, and the optimizer.

Separable and dilated convolutions follow the usual DARTS composition:

    SepConv k:  [relu, depthwise k, pointwise C->C, bn] x2, the second block
                mapping to the output channel count
    DilConv k:  relu, depthwise k (dilation 2), pointwise, bn

At stride 2 (reduction-cell edges leaving a cell input) the output channel
count doubles. Pools cannot change channels, so a strided pool is followed by
a 1x1 ReduceAdapter; Identity at stride 2 *is* a ReduceAdapter.
"""
import enum
import math

import numpy as np

from . import autograd as ag
from .autograd import Parameter


class OpKind(enum.Enum):
    IDENTITY = "identity"
    AVG_POOL_3 = "avg_pool_3x3"
    MAX_POOL_3 = "max_pool_3x3"
    SEP_CONV_3 = "sep_conv_3x3"
    SEP_CONV_5 = "sep_conv_5x5"
    DIL_CONV_3 = "dil_conv_3x3"
    DIL_CONV_5 = "dil_conv_5x5"
    # tower primitives
    GLOBAL_AVG_POOL = "global_avg_pool"
    FULLY_CONNECTED = "fully_connected"
    REDUCE_ADAPTER = "reduce_adapter"


EDGE_OPS = (
    OpKind.IDENTITY,
    OpKind.AVG_POOL_3,
    OpKind.MAX_POOL_3,
    OpKind.SEP_CONV_3,
    OpKind.SEP_CONV_5,
    OpKind.DIL_CONV_3,
    OpKind.DIL_CONV_5,
)

SEPARABLE = (OpKind.SEP_CONV_3, OpKind.SEP_CONV_5)


def edge_op_from_name(token):
    for kind in EDGE_OPS:
        if kind.value == token:
            return kind
    raise ValueError(f"unknown edge op {token!r}")


class ShapeError(ValueError):
    pass


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Module:
    def params(self):
        return []

    def param_count(self):
        return sum(p.data.size for p in self.params())


class BatchNorm(Module):
    def __init__(self, channels, name=""):
        self.name = name
        self.gamma = Parameter(np.ones(channels), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def params(self):
        return [self.gamma, self.beta]

    def __call__(self, x, training):
        return ag.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training)


class ReduceAdapter(Module):
    """relu -> 1x1 conv (strided) -> bn; maps (C, H, W) to (C_out, H/s, W/s)."""

    def __init__(self, c_in, c_out, stride, rng, name=""):
        self.stride = stride
        self.weight = Parameter(_he(rng, (c_out, c_in), c_in), name=f"{name}.pw")
        self.bn = BatchNorm(c_out, name=f"{name}.bn")

    def params(self):
        return [self.weight] + self.bn.params()

    def __call__(self, x, training):
        y = ag.pointwise_conv(ag.relu(x), self.weight, self.stride)
        return self.bn(y, training)


class Identity(Module):
    def __call__(self, x, training):
        return x


class Pool(Module):
    def __init__(self, kind, c_in, c_out, stride, rng, name=""):
        self.kind = kind
        self.stride = stride
        self.adapter = ReduceAdapter(c_in, c_out, 1, rng, name) if c_out != c_in else None

    def params(self):
        return self.adapter.params() if self.adapter else []

    def __call__(self, x, training):
        pool = ag.max_pool3 if self.kind is OpKind.MAX_POOL_3 else ag.avg_pool3
        y = pool(x, self.stride)
        return self.adapter(y, training) if self.adapter else y


class _DwPwBlock(Module):
    def __init__(self, c_in, c_out, k, stride, dilation, rng, name):
        self.k, self.stride, self.dilation = k, stride, dilation
        self.pad = dilation * (k - 1) // 2
        self.dw = Parameter(_he(rng, (c_in, k, k), k * k), name=f"{name}.dw")
        self.pw = Parameter(_he(rng, (c_out, c_in), c_in), name=f"{name}.pw")
        self.bn = BatchNorm(c_out, name=f"{name}.bn")

    def params(self):
        return [self.dw, self.pw] + self.bn.params()

    def __call__(self, x, training):
        y = ag.depthwise_conv(ag.relu(x), self.dw, self.stride, self.pad, self.dilation)
        return self.bn(ag.pointwise_conv(y, self.pw), training)


class SepConv(Module):
    def __init__(self, k, c_in, c_out, stride, rng, name=""):
        self.first = _DwPwBlock(c_in, c_in, k, stride, 1, rng, f"{name}.a")
        self.second = _DwPwBlock(c_in, c_out, k, 1, 1, rng, f"{name}.b")

    def params(self):
        return self.first.params() + self.second.params()

    def __call__(self, x, training):
        return self.second(self.first(x, training), training)


class DilConv(Module):
    def __init__(self, k, c_in, c_out, stride, rng, name=""):
        self.block = _DwPwBlock(c_in, c_out, k, stride, 2, rng, name)

    def params(self):
        return self.block.params()

    def __call__(self, x, training):
        return self.block(x, training)


def make_edge_op(kind, c_in, c_out, stride, rng, name=""):
    if kind not in EDGE_OPS:
        raise ValueError(f"{kind} is not an edge operation")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if (stride == 2) != (c_out == 2 * c_in) or (stride == 1 and c_out != c_in):
        raise ShapeError(f"{name}: stride {stride} cannot map {c_in} to {c_out} channels")
    name = name or kind.value
    if kind is OpKind.IDENTITY:
        return ReduceAdapter(c_in, c_out, 2, rng, name) if stride == 2 else Identity()
    if kind in (OpKind.AVG_POOL_3, OpKind.MAX_POOL_3):
        return Pool(kind, c_in, c_out, stride, rng, name)
    if kind is OpKind.SEP_CONV_3:
        return SepConv(3, c_in, c_out, stride, rng, name)
    if kind is OpKind.SEP_CONV_5:
        return SepConv(5, c_in, c_out, stride, rng, name)
    if kind is OpKind.DIL_CONV_3:
        return DilConv(3, c_in, c_out, stride, rng, name)
    return DilConv(5, c_in, c_out, stride, rng, name)


def edge_param_count(kind, c_in, c_out, stride):
    """Parameter count of an edge op without building it."""
    adapter = c_in * c_out + 2 * c_out
    if kind is OpKind.IDENTITY or kind in (OpKind.AVG_POOL_3, OpKind.MAX_POOL_3):
        return adapter if stride == 2 else 0
    k = 3 if kind in (OpKind.SEP_CONV_3, OpKind.DIL_CONV_3) else 5
    block = lambda ci, co: ci * k * k + ci * co + 2 * co
    if kind in SEPARABLE:
        return block(c_in, c_in) + block(c_in, c_out)
    return block(c_in, c_out)


def forward_edge_op(kind, x, op, stride, training=False, edge="edge"):
    """Run a built edge op on ``x`` after checking the input against its schema."""
    if x.data.ndim != 4:
        raise ShapeError(f"{edge}: expected an (N, C, H, W) input, got shape {x.shape}")
    expected = _expected_channels(op)
    if expected is not None and x.shape[1] != expected:
        raise ShapeError(f"{edge}: {kind.value} expects {expected} input channels, got {x.shape[1]}")
    if stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
        raise ShapeError(f"{edge}: stride 2 needs even spatial dims, got {x.shape[2:]}")
    return op(x, training)


def _expected_channels(op):
    if isinstance(op, ReduceAdapter):
        return op.weight.shape[1]
    if isinstance(op, SepConv):
        return op.first.dw.shape[0]
    if isinstance(op, DilConv):
        return op.block.dw.shape[0]
    if isinstance(op, Pool) and op.adapter is not None:
        return op.adapter.weight.shape[1]
    return None


class Stem(Module):
    def __init__(self, c_in, c_out, rng):
        self.weight = Parameter(_he(rng, (c_out, c_in, 3, 3), 9 * c_in), name="stem.conv")
        self.bn = BatchNorm(c_out, name="stem.bn")

    def params(self):
        return [self.weight] + self.bn.params()

    def __call__(self, x, training):
        return self.bn(ag.conv2d(x, self.weight, pad=1), training)


class ClassifierHead(Module):
    """Global average pooling followed by a fully connected layer."""

    def __init__(self, channels, classes, rng, name="tower"):
        bound = 1.0 / math.sqrt(channels)
        self.weight = Parameter(rng.uniform(-bound, bound, (classes, channels)), name=f"{name}.fc.w")
        self.bias = Parameter(np.zeros(classes), name=f"{name}.fc.b")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, training=False):
        return ag.linear(ag.global_avg_pool(x), self.weight, self.bias)


# --------------------------------------------------------------------------
# optimizer and schedules
# --------------------------------------------------------------------------

def sgd_step(params, lr, momentum, weight_decay):
    """Momentum SGD (v = mu*v + g + wd*w; w -= lr*v), then zero the grads.

    Parameters without a gradient this step are skipped. A non-finite
    gradient aborts with the parameter's name.
    """
    seen = set()
    for p in params:
        if id(p) in seen or not p.learnable:
            continue
        seen.add(id(p))
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
        g = p.grad
        if weight_decay and p.decay:
            g = g + weight_decay * p.data
        if momentum:
            if p.velocity is None:
                p.velocity = np.array(g, copy=True)
            else:
                p.velocity *= momentum
                p.velocity += g
            g = p.velocity
        p.data -= lr * g
        p.grad = None


def cosine_lr(epoch, total_epochs, lr_max):
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return lr_max * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0
