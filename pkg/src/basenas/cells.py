"""The cell search space and the stochastic super-network.

A cell has two input nodes and four intermediate nodes; intermediate node k
sums one mixed edge from every earlier node. The cell output concatenates the
four intermediate nodes along channels. All normal cells read one logit block
(``arch:normal``) and all reduce cells read another (``arch:reduce``); conv
weights are per cell.
"""
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import params as P
from .errors import ConfigError, ShapeError
from .rng import stream
from .tensor import Tensor, ops


class OpKind(IntEnum):
    SEP_CONV_3X3 = 0
    SEP_CONV_5X5 = 1
    SEP_CONV_7X7 = 2
    DIL_CONV_3X3 = 3
    DIL_CONV_5X5 = 4
    MAX_POOL_3X3 = 5
    AVG_POOL_3X3 = 6
    CONV_7X1_1X7 = 7
    SKIP_CONNECT = 8
    NONE = 9

    @property
    def label(self):
        return OP_NAMES[self]

    @classmethod
    def from_label(cls, name):
        try:
            return cls(OP_NAMES.index(name))
        except ValueError:
            raise ValueError(f"unknown operation {name!r}") from None


OP_NAMES = ("sep_conv_3x3", "sep_conv_5x5", "sep_conv_7x7", "dil_conv_3x3", "dil_conv_5x5",
            "max_pool_3x3", "avg_pool_3x3", "conv_7x1_1x7", "skip_connect", "none")
NUM_OPS = len(OpKind)
POOL_OPS = (OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3)
CONV_OPS = (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5, OpKind.SEP_CONV_7X7,
            OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5, OpKind.CONV_7X1_1X7)

N_INPUTS = 2
N_NODES = 4
# (source node, target node) for every edge; sources 0 and 1 are the cell inputs
EDGES = tuple((i, k) for k in range(N_INPUTS, N_INPUTS + N_NODES) for i in range(k))
N_EDGES = len(EDGES)


def edge_index(src, node):
    return EDGES.index((src, node))


# --------------------------------------------------------------------------
# parameter inventory


def op_param_shapes(kind, C, stride):
    """``[(part, shape, role)]`` for one op on a ``C``-channel edge.

    Conv kernels carry role ``"weight"`` (Gaussian posterior); batch-norm
    affines are ``"point"``.
    """
    kind = OpKind(kind)
    bn = [("bn1.g", (C,), "point"), ("bn1.b", (C,), "point")]
    if kind in (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5, OpKind.SEP_CONV_7X7):
        k = (3, 5, 7)[kind - OpKind.SEP_CONV_3X3]
        return [("dw1", (C, 1, k, k), "weight"), ("pw1", (C, C, 1, 1), "weight"), *bn,
                ("dw2", (C, 1, k, k), "weight"), ("pw2", (C, C, 1, 1), "weight"),
                ("bn2.g", (C,), "point"), ("bn2.b", (C,), "point")]
    if kind in (OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5):
        k = 3 if kind == OpKind.DIL_CONV_3X3 else 5
        return [("dw1", (C, 1, k, k), "weight"), ("pw1", (C, C, 1, 1), "weight"), *bn]
    if kind == OpKind.CONV_7X1_1X7:
        return [("w1", (C, C, 1, 7), "weight"), ("w2", (C, C, 7, 1), "weight"), *bn]
    if kind == OpKind.SKIP_CONNECT and stride == 2:
        return [("c1", (C // 2, C, 1, 1), "weight"), ("c2", (C // 2, C, 1, 1), "weight"), *bn]
    return []


@dataclass(frozen=True)
class CellPlan:
    index: int
    reduce: bool
    reduction_prev: bool
    c_pp: int
    c_p: int
    c: int

    @property
    def c_out(self):
        return N_NODES * self.c


def make_plans(n_cells, channels, stem_channels, reduce_positions):
    plans = []
    c_pp = c_p = stem_channels
    c = channels
    reduction_prev = False
    for l in range(n_cells):
        reduce = l in reduce_positions
        if reduce:
            c *= 2
        plans.append(CellPlan(l, reduce, reduction_prev, c_pp, c_p, c))
        reduction_prev = reduce
        c_pp, c_p = c_p, N_NODES * c
    return plans


def search_reduce_positions(n_cells):
    """Desk-scale search motif: normal and reduce cells alternate."""
    return tuple(range(1, n_cells, 2))


def full_reduce_positions(n_cells):
    """Full-network motif: reductions at one and two thirds of the depth."""
    return tuple(sorted({n_cells // 3, 2 * n_cells // 3}))


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    role: str  # weight | point
    init: str  # kaiming | ones | zeros


def _conv_spec(name, shape, role="point"):
    return ParamSpec(name, tuple(shape), role, "kaiming")


def _bn_specs(prefix, C):
    return [ParamSpec(f"{prefix}.g", (C,), "point", "ones"),
            ParamSpec(f"{prefix}.b", (C,), "point", "zeros")]


def _pre_specs(prefix, c_in, c_out, factorized):
    if factorized:
        return [_conv_spec(f"{prefix}.c1", (c_out // 2, c_in, 1, 1)),
                _conv_spec(f"{prefix}.c2", (c_out // 2, c_in, 1, 1)),
                *_bn_specs(f"{prefix}.bn", c_out)]
    return [_conv_spec(f"{prefix}.conv", (c_out, c_in, 1, 1)), *_bn_specs(f"{prefix}.bn", c_out)]


def _op_specs(prefix, kind, C, stride):
    out = []
    for part, shape, role in op_param_shapes(kind, C, stride):
        init = "kaiming" if role == "weight" else ("ones" if part.endswith(".g") else "zeros")
        out.append(ParamSpec(f"{prefix}.{part}", shape, role, init))
    return out


def cell_edge_stride(plan, src):
    return 2 if plan.reduce and src < N_INPUTS else 1


def stem_specs(res, in_channels, stem_channels):
    return [_conv_spec(f"heads.{res}.conv", (stem_channels, in_channels, 3, 3)),
            *_bn_specs(f"heads.{res}.bn", stem_channels)]


def classifier_specs(c_in, n_classes):
    return [_conv_spec("classifier.w", (n_classes, c_in)),
            ParamSpec("classifier.b", (n_classes,), "point", "zeros")]


def preprocess_specs(plan):
    return (_pre_specs(f"cells.{plan.index}.pre0", plan.c_pp, plan.c, plan.reduction_prev)
            + _pre_specs(f"cells.{plan.index}.pre1", plan.c_p, plan.c, False))


def edge_op_specs(plan, e, kind):
    src, _ = EDGES[e]
    return _op_specs(f"cells.{plan.index}.e{e}.{OP_NAMES[kind]}", kind, plan.c,
                     cell_edge_stride(plan, src))


# --------------------------------------------------------------------------
# forward pieces


def stem_forward(x, theta, res, stride):
    y = ops.conv2d(x, theta[f"heads.{res}.conv"], stride, 1)
    return ops.batch_norm(y, theta[f"heads.{res}.bn.g"], theta[f"heads.{res}.bn.b"])


def factorized_reduce(rx, c1, c2, gamma, beta):
    """Stride-2 1x1 convs on two offset grids, concatenated, then batch norm."""
    a = ops.conv2d(rx, c1, 2, 0)
    b = ops.conv2d(ops.take(rx, (slice(None), slice(None), slice(1, None), slice(1, None))),
                   c2, 2, 0)
    return ops.batch_norm(ops.concat([a, b], axis=1), gamma, beta)


def preprocess_forward(x, theta, prefix, factorized):
    r = ops.relu(x)
    if factorized:
        return factorized_reduce(r, theta[f"{prefix}.c1"], theta[f"{prefix}.c2"],
                                 theta[f"{prefix}.bn.g"], theta[f"{prefix}.bn.b"])
    y = ops.conv2d(r, theta[f"{prefix}.conv"])
    return ops.batch_norm(y, theta[f"{prefix}.bn.g"], theta[f"{prefix}.bn.b"])


def op_forward(kind, x, theta, prefix, stride, rx=None):
    """One candidate operation applied to edge input ``x``.

    ``rx`` may carry a precomputed ``relu(x)``; every conv op starts with it.
    """
    kind = OpKind(kind)

    def p(part):
        return theta[f"{prefix}.{part}"]

    if kind == OpKind.NONE:
        if stride == 1:
            return Tensor(np.zeros(x.shape))
        return Tensor(np.zeros(x.shape[:2] + (x.shape[2] // 2, x.shape[3] // 2)))
    if kind == OpKind.SKIP_CONNECT:
        if stride == 1:
            return x
        return factorized_reduce(ops.relu(x) if rx is None else rx, p("c1"), p("c2"),
                                 p("bn1.g"), p("bn1.b"))
    if kind == OpKind.MAX_POOL_3X3:
        return ops.max_pool2d(x, 3, stride, 1)
    if kind == OpKind.AVG_POOL_3X3:
        return ops.avg_pool2d(x, 3, stride, 1)
    C = x.shape[1]
    if rx is None:
        rx = ops.relu(x)
    if kind == OpKind.CONV_7X1_1X7:
        y = ops.conv2d(rx, p("w1"), (1, stride), (0, 3))
        y = ops.conv2d(y, p("w2"), (stride, 1), (3, 0))
        return ops.batch_norm(y, p("bn1.g"), p("bn1.b"))
    if kind in (OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5):
        k = 3 if kind == OpKind.DIL_CONV_3X3 else 5
        y = ops.conv2d(rx, p("dw1"), stride, k - 1, 2, C)
        y = ops.conv2d(y, p("pw1"))
        return ops.batch_norm(y, p("bn1.g"), p("bn1.b"))
    k = (3, 5, 7)[kind - OpKind.SEP_CONV_3X3]
    y = ops.conv2d(rx, p("dw1"), stride, k // 2, 1, C)
    y = ops.conv2d(y, p("pw1"))
    y = ops.relu(ops.batch_norm(y, p("bn1.g"), p("bn1.b")))
    y = ops.conv2d(y, p("dw2"), 1, k // 2, 1, C)
    y = ops.conv2d(y, p("pw2"))
    return ops.batch_norm(y, p("bn2.g"), p("bn2.b"))


def _check_simplex(z_edge):
    if z_edge.shape != (NUM_OPS,):
        raise ShapeError("mixed_edge", (NUM_OPS,), z_edge.shape)
    d = z_edge.data
    if abs(d.sum() - 1.0) > 1e-6 or d.min() < -1e-6 or d.max() > 1 + 1e-6:
        raise ValueError("mixed_edge: weights are not on the probability simplex")


def mixed_edge_forward(x, z_edge, theta, prefix, stride, rx=None):
    """``sum_j z_j * op_j(x)`` over every candidate op of one edge.

    ``prefix`` names the edge (``cells.<l>.e<e>``); op parameters live under
    ``<prefix>.<op name>.<part>``.
    """
    _check_simplex(z_edge)
    if rx is None:
        rx = ops.relu(x)
    outs = [op_forward(kind, x, theta, f"{prefix}.{OP_NAMES[kind]}", stride, rx)
            for kind in OpKind if kind != OpKind.NONE]
    # the none op contributes exactly zero and is left out of the sum
    return ops.mix(ops.take(z_edge, slice(0, NUM_OPS - 1)), outs)


def cell_forward(inputs, z_cell, theta, prefix, is_reduce):
    """Mixed cell on two preprocessed inputs; returns the 4-node concatenation."""
    s0, s1 = inputs
    if s0.shape != s1.shape:
        raise ShapeError("cell_forward", s0.shape, s1.shape)
    if z_cell.shape != (N_EDGES, NUM_OPS):
        raise ShapeError("cell_forward", (N_EDGES, NUM_OPS), z_cell.shape)
    states = [s0, s1]
    relus = {}
    for node in range(N_INPUTS, N_INPUTS + N_NODES):
        acc = None
        for src in range(node):
            e = edge_index(src, node)
            stride = 2 if is_reduce and src < N_INPUTS else 1
            if src not in relus:
                relus[src] = ops.relu(states[src])
            h = mixed_edge_forward(states[src], ops.take(z_cell, e), theta,
                                   f"{prefix}.e{e}", stride, relus[src])
            acc = h if acc is None else ops.add(acc, h)
        states.append(acc)
    return ops.concat(states[N_INPUTS:], axis=1)


# --------------------------------------------------------------------------
# the super-network


@dataclass
class SuperNetConfig:
    cells: int = 4
    channels: int = 8
    in_channels: int = 1
    n_classes: int = 10
    heads: dict = field(default_factory=lambda: {16: 1, 32: 2})
    stem_multiplier: int = 1
    reduce_positions: tuple = None
    prior_sigma: float = 0.01
    seed: int = 0


@dataclass
class SuperNet:
    config: SuperNetConfig
    plans: list
    specs: list

    @property
    def heads(self):
        return self.config.heads

    @property
    def n_classes(self):
        return self.config.n_classes

    def weight_names(self):
        return [s.name for s in self.specs if s.role == "weight"]

    def point_names(self):
        return [s.name for s in self.specs if s.role == "point"]


def _supernet_from_config(cfg, min_cells):
    if cfg.cells < min_cells:
        raise ConfigError(f"need at least {min_cells} cells, got {cfg.cells}")
    if cfg.channels < 1:
        raise ConfigError(f"channels must be >= 1, got {cfg.channels}")
    if cfg.channels % 2:
        raise ConfigError("channels must be even (factorized reduction halves them)")
    if not cfg.heads:
        raise ConfigError("at least one resolution head is required")
    reduce_pos = cfg.reduce_positions
    if reduce_pos is None:
        reduce_pos = search_reduce_positions(cfg.cells)
    stem_c = cfg.channels * cfg.stem_multiplier
    plans = make_plans(cfg.cells, cfg.channels, stem_c, tuple(reduce_pos))
    specs = []
    for res in sorted(cfg.heads):
        specs += stem_specs(res, cfg.in_channels, stem_c)
    for plan in plans:
        specs += preprocess_specs(plan)
        for e in range(N_EDGES):
            for kind in OpKind:
                specs += edge_op_specs(plan, e, kind)
    specs += classifier_specs(plans[-1].c_out, cfg.n_classes)
    return SuperNet(cfg, plans, specs)


def build_supernet(cfg=None, min_cells=2, **overrides):
    """Build the super-network structure (parameters come from :func:`init_params`).

    Searching needs both cell types, hence ``min_cells=2``; single-cell
    instances are only useful for equivalence checks.
    """
    cfg = cfg or SuperNetConfig()
    if overrides:
        cfg = SuperNetConfig(**{**cfg.__dict__, **overrides})
    return _supernet_from_config(cfg, min_cells)


def _inv_softplus(y):
    return float(np.log(np.expm1(y)))


def init_spec_array(spec, rng):
    if spec.init == "ones":
        return np.ones(spec.shape)
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    fan_in = int(np.prod(spec.shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=spec.shape)


def init_params(net, seed=None):
    """Fresh meta-parameters: Kaiming-uniform convs, unit BN, zero logits."""
    seed = net.config.seed if seed is None else seed
    rng = stream(seed, "init")
    s0 = _inv_softplus(net.config.prior_sigma)
    out = {}
    for spec in net.specs:
        arr = init_spec_array(spec, rng)
        if spec.role == "weight":
            out[P.MU + spec.name] = arr
            out[P.S + spec.name] = np.full(spec.shape, s0)
        else:
            out[P.PT + spec.name] = arr
    out[P.ARCH_NORMAL] = np.zeros((N_EDGES, NUM_OPS))
    out[P.ARCH_REDUCE] = np.zeros((N_EDGES, NUM_OPS))
    return out


def supernet_forward(net, x, resolution, theta, z):
    """Logits of the relaxed network for a fixed weight and architecture sample.

    ``theta`` maps parameter names (no role prefix) to tensors; ``z`` maps
    ``"normal"``/``"reduce"`` to ``(edges, ops)`` simplex rows.
    """
    if resolution not in net.heads:
        raise ConfigError(f"no head registered for resolution {resolution}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    cfg = net.config
    expect = (cfg.in_channels, resolution, resolution)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ShapeError("supernet_forward", ("B",) + expect, x.shape)
    w = theta["classifier.w"]
    if w.shape != (cfg.n_classes, net.plans[-1].c_out):
        raise ShapeError("classifier", (cfg.n_classes, net.plans[-1].c_out), w.shape)
    s = stem_forward(x, theta, resolution, net.heads[resolution])
    s0 = s1 = s
    for plan in net.plans:
        pre = f"cells.{plan.index}"
        h0 = preprocess_forward(s0, theta, f"{pre}.pre0", plan.reduction_prev)
        h1 = preprocess_forward(s1, theta, f"{pre}.pre1", False)
        out = cell_forward((h0, h1), z["reduce" if plan.reduce else "normal"], theta, pre,
                           plan.reduce)
        s0, s1 = s1, out
    return ops.linear(ops.global_avg_pool(s1), w, theta["classifier.b"])


def point_theta(params):
    """``theta`` dict using posterior means for weights (no sampling)."""
    out = {}
    for k, v in params.items():
        if k.startswith(P.MU):
            out[k[len(P.MU):]] = v if isinstance(v, Tensor) else Tensor(v)
        elif k.startswith(P.PT):
            out[k[len(P.PT):]] = v if isinstance(v, Tensor) else Tensor(v)
    return out
