"""Differentiable primitives and the composite layers built from them.

Primitive vjps are expressed with these same ops so gradients can be taken
through gradients. Composite ops (cross-entropy, softmax, average pooling)
inherit differentiability from their parts.
"""
import contextlib
import hashlib

import numpy as np

from ..errors import ShapeError
from . import kernels
from .core import Tensor, as_tensor, is_recording, make

# When set, relu and max-pool append a digest of their branch choices here.
# Finite-difference checks use it to spot probes that straddle a kink.
_KINKS = None


@contextlib.contextmanager
def trace_kinks():
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def _note_kink(arr):
    if _KINKS is not None:
        _KINKS.append(hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=8).digest())


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


# vjps below take a plain-numpy path when no graph is being recorded; the
# Tensor-op path is only needed for gradients of gradients.


def _np_sum_to(a, shape):
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and a.shape[i + lead] != 1)
    return np.require(a.sum(axis=axes, keepdims=True).reshape(shape), requirements="C")


# --------------------------------------------------------------------------
# shape plumbing


def sum_to(x, shape):
    """Sum ``x`` down to a shape it was broadcast from."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(shape)
    data = np.require(data.reshape(shape), requirements="C")
    return make("sum_to", data, (x,), lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.require(np.broadcast_to(x.data, shape), requirements="C")
    return make("broadcast_to", data, (x,), lambda g: (sum_to(g, x.shape),))


def reshape(x, shape):
    shape = tuple(shape)
    data = x.data.reshape(shape)
    def vjp(g):
        if not is_recording():
            return (Tensor(g.data.reshape(x.shape)),)
        return (reshape(g, x.shape),)

    return make("reshape", data, (x,), vjp)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    data = np.require(np.transpose(x.data, axes), requirements="C")
    return make("transpose", data, (x,), lambda g: (transpose(g, inv),))


def take(x, index):
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    data = np.require(x.data[index], requirements="C")
    def vjp(g):
        if not is_recording():
            out = np.zeros(x.shape)
            out[index] = g.data
            return (Tensor(out),)
        return (embed(g, index, x.shape),)

    return make("take", data, (x,), vjp)


def embed(x, index, shape):
    """Inverse of :func:`take`: zeros of ``shape`` with ``x`` written at ``index``."""
    data = np.zeros(shape)
    data[index] = x.data
    return make("embed", data, (x,), lambda g: (take(g, index),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        fast = not is_recording()
        out = []
        for k in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(bounds[k]), int(bounds[k + 1]))
            idx = tuple(idx)
            out.append(Tensor(np.require(g.data[idx], requirements="C")) if fast else take(g, idx))
        return tuple(out)

    return make("concat", data, tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shp = list(t.shape)
        shp.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shp))
    return concat(expanded, axis)


def mix(weights, tensors):
    """``sum_j weights[j] * tensors[j]`` for a 1-d weight vector."""
    weights = as_tensor(weights)
    tensors = [as_tensor(t) for t in tensors]
    if weights.shape != (len(tensors),):
        raise ShapeError("mix", (len(tensors),), weights.shape)
    wd = weights.data
    data = wd[0] * tensors[0].data
    for j in range(1, len(tensors)):
        data = data + wd[j] * tensors[j].data

    def vjp(g):
        if not is_recording():
            gd = g.data
            gw = Tensor(np.array([np.vdot(gd, t.data) for t in tensors])) \
                if weights.tracked else None
            return (gw,) + tuple(Tensor(wd[j] * gd) if t.tracked else None
                                 for j, t in enumerate(tensors))
        out = []
        if weights.tracked:
            out.append(stack([sum(mul(g, t)) for t in tensors]))
        else:
            out.append(None)
        for j, t in enumerate(tensors):
            out.append(mul(g, take(weights, j)) if t.tracked else None)
        return tuple(out)

    return make("mix", data, (weights, *tensors), vjp)


def sq_dist(tensors, centers, weights):
    """``sum_i sum(weights[i] * (tensors[i] - centers[i]) ** 2)`` as one op.

    Centers and weights are constants (arrays or scalars).
    """
    tensors = [as_tensor(t) for t in tensors]
    total = 0.0
    for t, c, w in zip(tensors, centers, weights):
        d = t.data - c
        total += float(np.sum(w * d * d))

    def vjp(g):
        out = []
        for t, c, w in zip(tensors, centers, weights):
            if not t.tracked:
                out.append(None)
                continue
            two_w = Tensor(2.0 * np.asarray(w, dtype=np.float64))
            out.append(mul(g, mul(sub(t, Tensor(np.asarray(c, dtype=np.float64))), two_w)))
        return tuple(out)

    return make("sq_dist", np.asarray(total), tuple(tensors), vjp)


# --------------------------------------------------------------------------
# elementwise arithmetic


_NP_VJP = {
    "add": (lambda g, a, b: g, lambda g, a, b: g),
    "sub": (lambda g, a, b: g, lambda g, a, b: -g),
    "mul": (lambda g, a, b: g * b, lambda g, a, b: g * a),
    "div": (lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b)),
}


def _binary(op, a, b, fwd, vjp_a, vjp_b):
    a = as_tensor(a)
    b = as_tensor(b)
    data = fwd(a.data, b.data)

    def vjp(g):
        if not is_recording():
            fa, fb = _NP_VJP[op]
            ga = Tensor(_np_sum_to(fa(g.data, a.data, b.data), a.shape)) if a.tracked else None
            gb = Tensor(_np_sum_to(fb(g.data, a.data, b.data), b.shape)) if b.tracked else None
            return ga, gb
        ga = sum_to(vjp_a(g, a, b), a.shape) if a.tracked else None
        gb = sum_to(vjp_b(g, a, b), b.shape) if b.tracked else None
        return ga, gb

    return make(op, data, (a, b), vjp)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, a, b: g, lambda g, a, b: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, a, b: g, lambda g, a, b: neg(g))


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda g, a, b: mul(g, b), lambda g, a, b: mul(g, a))


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda g, a, b: div(g, b),
                   lambda g, a, b: neg(div(mul(g, a), mul(b, b))))


def neg(x):
    x = as_tensor(x)
    return make("neg", -x.data, (x,), lambda g: (neg(g),))


def power(x, p):
    p = float(p)
    x = as_tensor(x)
    data = np.power(x.data, p)
    return make("power", data, (x,), lambda g: (mul(g, mul(p, power(x, p - 1.0))),))


def exp(x):
    x = as_tensor(x)
    out = None

    def vjp(g):
        return (mul(g, out),)

    out = make("exp", np.exp(x.data), (x,), vjp)
    return out


def log(x):
    x = as_tensor(x)
    return make("log", np.log(x.data), (x,), lambda g: (div(g, x),))


def sigmoid(x):
    x = as_tensor(x)
    out = None

    def vjp(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = make("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * x.data)), (x,), vjp)
    return out


def softplus(x):
    """``log(1 + exp(x))`` computed without overflow."""
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return make("softplus", data, (x,), lambda g: (mul(g, sigmoid(x)),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    _note_kink(mask)
    return mul(x, Tensor(mask.astype(np.float64)))


# --------------------------------------------------------------------------
# reductions and linear algebra


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    data = np.asarray(x.data.sum(axis=axes, keepdims=keepdims), dtype=np.float64)
    kshape = _keep_shape(x.shape, axes)

    def vjp(g):
        if not is_recording():
            gd = np.broadcast_to(g.data.reshape(kshape), x.shape)
            return (Tensor(np.require(gd, requirements="C")),)
        return (broadcast_to(reshape(g, kshape), x.shape),)

    return make("sum", data, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axes, keepdims), 1.0 / n)


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", (a.shape[0] if a.ndim else None, "k") + ("k", "n"),
                         a.shape + b.shape)

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.tracked else None
        gb = matmul(transpose(a), g) if b.tracked else None
        return ga, gb

    return make("matmul", a.data @ b.data, (a, b), vjp)


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    m = Tensor(np.max(x.data, axis=axis, keepdims=True))
    out = add(log(sum(exp(sub(x, m)), axis, keepdims=True)), m)
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(x, axis=-1):
    return sub(x, logsumexp(x, axis, keepdims=True))


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``(B, K)`` logits against int labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", ("B", "K") + ("B",), logits.shape + labels.shape)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    picked = sum(mul(logits, Tensor(onehot)), 1)
    return mean(sub(logsumexp(logits, 1), picked))


def linear(x, w, b=None):
    y = matmul(x, transpose(w))
    return y if b is None else add(y, b)


def global_avg_pool(x):
    return mean(x, (2, 3))


# --------------------------------------------------------------------------
# convolution


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, w, stride=1, padding=0, dilation=1, groups=1):
    x = as_tensor(x)
    w = as_tensor(w)
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] * groups \
            or w.shape[0] % groups:
        raise ShapeError("conv2d", ("B", w.shape[1] * groups, "H", "W"), x.shape)
    data = kernels.conv2d(x.data, w.data, stride, padding, dilation, groups)
    hw = x.shape[2:]
    k = w.shape[2:]

    def vjp(g):
        gx = _conv_in(g, w, hw, stride, padding, dilation, groups) if x.tracked else None
        gw = _conv_w(x, g, k, stride, padding, dilation, groups) if w.tracked else None
        return gx, gw

    return make("conv2d", data, (x, w), vjp)


def _conv_in(gy, w, hw, stride, padding, dilation, groups):
    data = kernels.conv2d_input_grad(gy.data, w.data, hw, stride, padding, dilation, groups)

    def vjp(h):
        ggy = conv2d(h, w, stride, padding, dilation, groups) if gy.tracked else None
        gw = _conv_w(h, gy, w.shape[2:], stride, padding, dilation, groups) \
            if w.tracked else None
        return ggy, gw

    return make("conv2d_input_grad", data, (gy, w), vjp)


def _conv_w(x, gy, k, stride, padding, dilation, groups):
    data = kernels.conv2d_weight_grad(x.data, gy.data, k, stride, padding, dilation, groups)
    hw = x.shape[2:]

    def vjp(v):
        gx = _conv_in(gy, v, hw, stride, padding, dilation, groups) if x.tracked else None
        ggy = conv2d(x, v, stride, padding, dilation, groups) if gy.tracked else None
        return gx, ggy

    return make("conv2d_weight_grad", data, (x, gy), vjp)


# --------------------------------------------------------------------------
# pooling


def gather(x, idx):
    """``x.ravel()[idx]`` for an integer index array."""
    x = as_tensor(x)
    data = x.data.reshape(-1)[idx]
    return make("gather", data, (x,), lambda g: (scatter_add(g, idx, x.shape),))


def scatter_add(x, idx, shape):
    size = int(np.prod(shape))
    data = np.bincount(idx.reshape(-1), weights=x.data.reshape(-1), minlength=size)
    return make("scatter_add", data.reshape(shape), (x,), lambda g: (gather(g, idx),))


def max_pool2d(x, k=3, stride=1, pad=1):
    x = as_tensor(x)
    idx = kernels.maxpool_argmax(x.data, k, stride, pad)
    _note_kink(idx)
    return gather(x, idx)


_AVG_CACHE = {}


def avg_pool2d(x, k=3, stride=1, pad=1):
    """Average pooling that excludes padding from the divisor."""
    x = as_tensor(x)
    C = x.shape[1]
    H, W = x.shape[2:]
    key = (C, H, W, k, stride, pad)
    if key not in _AVG_CACHE:
        ones = np.ones((C, 1, k, k))
        cnt = kernels.conv2d(np.ones((1, 1, H, W)), np.ones((1, 1, k, k)),
                             (stride, stride), (pad, pad), (1, 1), 1)
        _AVG_CACHE[key] = (Tensor(ones), Tensor(1.0 / cnt))
    ones, inv = _AVG_CACHE[key]
    return mul(conv2d(x, ones, stride, pad, 1, C), inv)


# --------------------------------------------------------------------------
# normalisation


def batch_norm(x, gamma, beta, eps=1e-5):
    """Training-mode batch norm over every axis except channels (axis 1)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batch_norm", (C,), gamma.shape)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def vjp(g):
        if not is_recording():
            gd = g.data
            gx = gg = gb = None
            if x.tracked:
                gbar = gd.mean(axis=axes, keepdims=True)
                proj = (gd * xhat).mean(axis=axes, keepdims=True)
                gx = Tensor(gamma.data.reshape(bshape) * inv * (gd - gbar - xhat * proj))
            if gamma.tracked:
                gg = Tensor((gd * xhat).sum(axis=axes))
            if beta.tracked:
                gb = Tensor(gd.sum(axis=axes))
            return gx, gg, gb
        # rebuild the statistics from x so second derivatives see them
        xc_t = sub(x, mean(x, axes, keepdims=True))
        inv_t = power(add(mean(mul(xc_t, xc_t), axes, keepdims=True), eps), -0.5)
        xhat_t = mul(xc_t, inv_t)
        gx = gg = gb = None
        if x.tracked:
            gbar = mean(g, axes, keepdims=True)
            proj = mean(mul(g, xhat_t), axes, keepdims=True)
            gx = mul(mul(reshape(gamma, bshape), inv_t), sub(sub(g, gbar), mul(xhat_t, proj)))
        if gamma.tracked:
            gg = sum(mul(g, xhat_t), axes)
        if beta.tracked:
            gb = sum(g, axes)
        return gx, gg, gb

    return make("batch_norm", data, (x, gamma, beta), vjp)
