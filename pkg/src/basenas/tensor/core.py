"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` owns an ordered list of records. Leaves are registered with
:meth:`Tape.watch`; every op whose inputs touch a watched tensor appends one
record holding the input node ids and a vector-Jacobian closure. Backward
walks the records in reverse.

Every vjp closure is written in terms of :class:`Tensor` ops, so running the
backward pass with ``create_graph=True`` records the gradient computation on
the same tape and it can be differentiated again.
"""
import math
import threading
from contextlib import contextmanager

import numpy as np

from ..errors import GraphError, NumericFault, ShapeError

_local = threading.local()


def _paused():
    return getattr(_local, "paused", 0) > 0


@contextmanager
def no_record():
    """Run ops without recording them on any tape."""
    _local.paused = getattr(_local, "paused", 0) + 1
    try:
        yield
    finally:
        _local.paused -= 1


@contextmanager
def _record_anyway():
    saved = getattr(_local, "paused", 0)
    _local.paused = 0
    try:
        yield
    finally:
        _local.paused = saved


def is_recording():
    return not _paused()


class Tensor:
    """Dense float64 array, optionally tied to a node on a tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape=None, node=None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 \
            else np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tracked(self):
        return self.tape is not None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; the ops themselves live in ops.py
    def __add__(self, o):
        return _ops().add(self, o)

    def __radd__(self, o):
        return _ops().add(o, self)

    def __sub__(self, o):
        return _ops().sub(self, o)

    def __rsub__(self, o):
        return _ops().sub(o, self)

    def __mul__(self, o):
        return _ops().mul(self, o)

    def __rmul__(self, o):
        return _ops().mul(o, self)

    def __truediv__(self, o):
        return _ops().div(self, o)

    def __rtruediv__(self, o):
        return _ops().div(o, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p):
        return _ops().power(self, p)

    def __matmul__(self, o):
        return _ops().matmul(self, o)

    def __getitem__(self, index):
        return _ops().take(self, index)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)


def _ops():
    from . import ops

    return ops


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Record:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """An ordered record of operations (one graph).

    Not thread-safe: use one tape per thread.
    """

    def __init__(self):
        self.records = []
        self.leaves = {}
        self.names = {}
        self._next = 0
        self.consumed = False

    def __len__(self):
        return len(self.records)

    def watch(self, value, name=None):
        """Register ``value`` as a differentiable leaf and return its tensor."""
        self._check_live()
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(np.array(data, dtype=np.float64, copy=True), self, self._next)
        self.leaves[self._next] = t
        if name is not None:
            self.names[self._next] = name
        self._next += 1
        return t

    def _check_live(self):
        if self.consumed:
            raise GraphError("graph already consumed by a backward pass")

    def _append(self, op, data, inputs, vjp):
        self._check_live()
        node = self._next
        self._next += 1
        self.records.append(_Record(op, inputs, node, vjp))
        return Tensor(data, self, node)


def make(op, data, inputs, vjp):
    """Wrap ``data`` as the output of ``op`` and record it when needed."""
    # a non-finite sum is cheap to detect; only then look elementwise
    if not math.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NumericFault(f"{op}: non-finite output")
    if _paused():
        return Tensor(data)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise GraphError(f"{op}: inputs belong to different tapes")
    if tape is None:
        return Tensor(data)
    nodes = tuple(t.node if t.tape is not None else None for t in inputs)
    return tape._append(op, data, nodes, vjp)


def _backprop(loss, wanted, create_graph, retain_graph):
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise GraphError("loss is not recorded on a tape")
    if loss.size != 1:
        raise ShapeError("backward", "scalar", loss.shape)
    tape = loss.tape
    tape._check_live()
    grads = {loss.node: Tensor(np.ones_like(loss.data))}
    keep = set(tape.leaves) if wanted is None else set(wanted)
    lo = min(keep) if keep else 0
    records = tape.records
    n = len(records)
    ctx = _record_anyway() if create_graph else no_record()
    with ctx:
        for k in range(n - 1, -1, -1):
            rec = records[k]
            if rec.out <= lo:
                break
            g = grads.get(rec.out)
            if g is None:
                continue
            if rec.out not in keep:
                del grads[rec.out]
            in_grads = rec.vjp(g)
            for nid, gi in zip(rec.inputs, in_grads):
                if nid is None or gi is None:
                    continue
                prev = grads.get(nid)
                grads[nid] = gi if prev is None else prev + gi
    if not (create_graph or retain_graph):
        tape.consumed = True
    return grads


def backward(loss, create_graph=False, retain_graph=False):
    """Gradients of scalar ``loss`` for every leaf on its tape.

    Returns a dict ``node id -> Tensor``. Leaves the loss does not depend on
    map to zeros.
    """
    grads = _backprop(loss, None, create_graph, retain_graph)
    out = {}
    for nid, leaf in loss.tape.leaves.items():
        g = grads.get(nid)
        out[nid] = g if g is not None else Tensor(np.zeros_like(leaf.data))
    return out


def grad(loss, wrt, create_graph=False, retain_graph=False):
    """Gradients of ``loss`` with respect to arbitrary recorded tensors.

    ``wrt`` may contain intermediate (non-leaf) tensors, which is what a
    tracked inner optimisation loop needs.
    """
    wrt = list(wrt)
    for t in wrt:
        if t.tape is not loss.tape:
            raise GraphError("grad: wrt tensor is not on the loss tape")
    grads = _backprop(loss, [t.node for t in wrt], create_graph, retain_graph)
    out = []
    for t in wrt:
        g = grads.get(t.node)
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def sgd_step(params, grads, lr):
    """Plain SGD, ``p - lr * g``, over a name -> array mapping.

    Parameters absent from ``grads`` are carried over unchanged.
    """
    if not lr >= 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = g.data if isinstance(g, Tensor) else g
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ShapeError("sgd_step", p.shape, g.shape)
        out[name] = p - lr * g
    return out
