"""Discrete architectures: derivation, full networks, training and analysis.

A genotype keeps, for every intermediate node of the normal and the reduce
cell, exactly two incoming edges and one (non-none) operation per edge.
"""
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import params as P
from .cells import (EDGES, N_INPUTS, N_NODES, NUM_OPS, OP_NAMES, OpKind,
                    cell_edge_stride, classifier_specs, edge_index, edge_op_specs,
                    full_reduce_positions, init_spec_array, make_plans, op_forward,
                    point_theta, preprocess_forward, preprocess_specs, stem_forward,
                    stem_specs, supernet_forward)
from .errors import ConfigError, DerivationError, FormatError, NumericFault
from .meta import inner_adapt
from .rng import stream
from .tensor import Tape, Tensor, grad, no_record, ops, sgd_step
from .variational import CELL_TYPES, arch_probs, eval_arch

GENOTYPE_HEADER = "genotype v1"
DEGENERATE_MASS = 1e-9


@dataclass(frozen=True)
class Genotype:
    """``normal``/``reduce``: per intermediate node, two ``(input, OpKind)`` pairs."""
    normal: tuple
    reduce: tuple
    provenance: dict = field(default_factory=dict, compare=False, hash=False)

    def cell(self, kind):
        return self.normal if kind == "normal" else self.reduce

    def edges(self, kind):
        """``{edge index: OpKind}`` of the retained edges."""
        out = {}
        for n, pairs in enumerate(self.cell(kind)):
            for src, op in pairs:
                out[edge_index(src, n + N_INPUTS)] = OpKind(op)
        return out

    def validate(self):
        for kind in CELL_TYPES:
            nodes = self.cell(kind)
            if len(nodes) != N_NODES:
                raise FormatError(f"{kind} cell needs {N_NODES} nodes, got {len(nodes)}")
            for n, pairs in enumerate(nodes):
                node = n + N_INPUTS
                if len(pairs) != 2:
                    raise FormatError(f"{kind} node {node}: need exactly 2 edges")
                srcs = [s for s, _ in pairs]
                if len(set(srcs)) != 2 or any(not 0 <= s < node for s in srcs):
                    raise FormatError(f"{kind} node {node}: bad inputs {srcs}")
                if any(OpKind(op) == OpKind.NONE for _, op in pairs):
                    raise FormatError(f"{kind} node {node}: 'none' cannot be retained")
        return self

    def to_text(self):
        lines = [GENOTYPE_HEADER]
        for kind in CELL_TYPES:
            lines.append(kind)
            for n, pairs in enumerate(self.cell(kind)):
                body = " | ".join(f"{s} {OP_NAMES[op]}" for s, op in pairs)
                lines.append(f"  {n + N_INPUTS}: {body}")
        for k in sorted(self.provenance):
            lines.append(f"# {k} = {self.provenance[k]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln.rstrip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != GENOTYPE_HEADER:
            raise FormatError("not a genotype file (missing header)")
        cells = {}
        prov = {}
        current = None
        for ln in lines[1:]:
            if ln.startswith("#"):
                k, _, v = ln[1:].partition("=")
                prov[k.strip()] = v.strip()
            elif ln in CELL_TYPES:
                current = ln
                cells[current] = []
            else:
                if current is None:
                    raise FormatError(f"node line before a cell type: {ln!r}")
                try:
                    _, body = ln.split(":", 1)
                    pairs = []
                    for part in body.split("|"):
                        s, name = part.split()
                        pairs.append((int(s), OpKind.from_label(name)))
                except ValueError as e:
                    raise FormatError(f"bad node line {ln!r}: {e}") from None
                cells[current].append(tuple(pairs))
        if set(cells) != set(CELL_TYPES):
            raise FormatError("genotype must list both cell types")
        return cls(tuple(cells["normal"]), tuple(cells["reduce"]), prov).validate()

    def digest(self):
        body = "\n".join(ln for ln in self.to_text().splitlines() if not ln.startswith("#"))
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


def uniform_genotype(op):
    """Every node reads its two nearest predecessors through ``op``."""
    nodes = tuple(((n + N_INPUTS - 2, OpKind(op)), (n + N_INPUTS - 1, OpKind(op)))
                  for n in range(N_NODES))
    return Genotype(nodes, nodes)


# --------------------------------------------------------------------------
# derivation


def _derive_cell(probs, kind):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (len(EDGES), NUM_OPS):
        raise ConfigError(f"{kind}: probabilities must be ({len(EDGES)}, {NUM_OPS})")
    real = probs[:, :OpKind.NONE]
    nodes = []
    for node in range(N_INPUTS, N_INPUTS + N_NODES):
        cands = []
        for src in range(node):
            e = edge_index(src, node)
            # argmax returns the first maximum: lowest op code wins ties
            op = int(np.argmax(real[e]))
            cands.append((real[e, op], src, op))
        if all(c[0] < DEGENERATE_MASS for c in cands):
            raise DerivationError(f"{kind} node {node}: every incoming edge is 'none'")
        # strongest edges first, lower input index first on ties
        cands.sort(key=lambda c: (-c[0], c[1]))
        keep = sorted(cands[:2], key=lambda c: c[1])
        nodes.append(tuple((src, OpKind(op)) for _, src, op in keep))
    return tuple(nodes)


def derive_from_probs(probs, provenance=None):
    """Commit per-edge op probabilities ``{"normal": (14, J), "reduce": ...}`` to a genotype."""
    return Genotype(_derive_cell(probs["normal"], "normal"),
                    _derive_cell(probs["reduce"], "reduce"), dict(provenance or {}))


def average_probs(param_sets):
    acc = None
    for p in param_sets:
        pr = arch_probs(p)
        if acc is None:
            acc = {c: pr[c].copy() for c in CELL_TYPES}
        else:
            for c in CELL_TYPES:
                acc[c] = acc[c] + pr[c]
    return {c: acc[c] / len(param_sets) for c in CELL_TYPES}


def derive_genotype(W, tasks, cfg, objective, tau, key="derive"):
    """Adapt ``W`` to each task, average ``softmax(phi)``, then commit.

    Returns ``(genotype, averaged probabilities, adapted parameter sets)``.
    """
    if not tasks:
        raise ConfigError("derivation needs at least one task")
    adapted = [inner_adapt(W, t, cfg, objective, key=(key, i), tau=tau).params
               for i, t in enumerate(tasks)]
    genotype, probs = commit_adapted(adapted, tau)
    return genotype, probs, adapted


def commit_adapted(adapted, tau):
    """Average ``softmax(phi)`` over adapted parameter sets and commit."""
    if not adapted:
        raise ConfigError("derivation needs at least one adapted parameter set")
    probs = average_probs(adapted)
    phi = {P.ARCH_NORMAL: probs["normal"], P.ARCH_REDUCE: probs["reduce"]}
    prov = {"probs_sha256": P.params_hash(phi)[:16], "tasks": len(adapted), "tau": repr(tau)}
    return derive_from_probs(probs, prov), probs


# --------------------------------------------------------------------------
# full networks


@dataclass
class FullNetConfig:
    cells: int = 6
    channels: int = 8
    in_channels: int = 1
    n_classes: int = 10
    heads: dict = field(default_factory=lambda: {16: 1, 32: 2})
    reduce_positions: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.cells < 1 or self.channels < 1 or self.n_classes < 2:
            raise ConfigError("cells, channels must be >= 1 and n_classes >= 2")
        if self.channels % 2:
            raise ConfigError("channels must be even")
        self.heads = {int(k): int(v) for k, v in self.heads.items()}


@dataclass
class FullNet:
    config: FullNetConfig
    genotype: Genotype
    plans: list
    specs: list

    @property
    def heads(self):
        return self.config.heads

    def param_count(self):
        return int(sum(np.prod(s.shape) for s in self.specs))


def build_full_network(genotype, cfg=None):
    cfg = cfg or FullNetConfig()
    genotype.validate()
    reduce_pos = cfg.reduce_positions
    if reduce_pos is None:
        reduce_pos = full_reduce_positions(cfg.cells)
    plans = make_plans(cfg.cells, cfg.channels, cfg.channels, tuple(reduce_pos))
    specs = []
    for res in sorted(cfg.heads):
        specs += stem_specs(res, cfg.in_channels, cfg.channels)
    for plan in plans:
        specs += preprocess_specs(plan)
        edges = genotype.edges("reduce" if plan.reduce else "normal")
        for e in sorted(edges):
            specs += edge_op_specs(plan, e, edges[e])
    specs += classifier_specs(plans[-1].c_out, cfg.n_classes)
    return FullNet(cfg, genotype, plans, specs)


def init_full_params(net, seed=None):
    rng = stream(net.config.seed if seed is None else seed, "full-init")
    return {s.name: init_spec_array(s, rng) for s in net.specs}


def full_forward(net, x, resolution, theta):
    if resolution not in net.heads:
        raise ConfigError(f"no head registered for resolution {resolution}")
    theta = {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in theta.items()}
    x = x if isinstance(x, Tensor) else Tensor(x)
    s0 = s1 = stem_forward(x, theta, resolution, net.heads[resolution])
    for plan in net.plans:
        pre = f"cells.{plan.index}"
        h0 = preprocess_forward(s0, theta, f"{pre}.pre0", plan.reduction_prev)
        h1 = preprocess_forward(s1, theta, f"{pre}.pre1", False)
        kind = "reduce" if plan.reduce else "normal"
        states = [h0, h1]
        relus = {}
        for n, pairs in enumerate(net.genotype.cell(kind)):
            node = n + N_INPUTS
            acc = None
            for src, op in pairs:
                e = edge_index(src, node)
                if src not in relus:
                    relus[src] = ops.relu(states[src])
                h = op_forward(op, states[src], theta, f"{pre}.e{e}.{OP_NAMES[op]}",
                               cell_edge_stride(plan, src), relus[src])
                acc = h if acc is None else ops.add(acc, h)
            states.append(acc)
        s0, s1 = s1, ops.concat(states[N_INPUTS:], axis=1)
    return ops.linear(ops.global_avg_pool(s1), theta["classifier.w"], theta["classifier.b"])


def accuracy(forward, x, y, chunk=64):
    """Fraction of correct argmax predictions; ``forward(xb)`` returns logits."""
    if len(y) == 0:
        return float("nan")
    hits = 0
    with no_record():
        for i in range(0, len(y), chunk):
            logits = forward(x[i:i + chunk]).data
            hits += int(np.sum(np.argmax(logits, axis=1) == y[i:i + chunk]))
    return hits / len(y)


@dataclass
class TrainSchedule:
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 16
    seed: int = 0


def train_full(net, theta, task, schedule):
    """Plain SGD with cosine-decayed learning rate over whole epochs.

    Returns the trained parameters and one ``{epoch, loss, train_acc,
    val_acc}`` row per epoch (epoch 0 is the initialization).
    """
    res = task.resolution
    theta = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}

    def evaluate(th, epoch, loss):
        f = lambda xb: full_forward(net, xb, res, th)  # noqa: E731
        return {"epoch": epoch, "loss": loss,
                "train_acc": accuracy(f, task.x_train, task.y_train),
                "val_acc": accuracy(f, task.x_val, task.y_val)}

    trace = [evaluate(theta, 0, float("nan"))]
    steps_per = task.steps_per_epoch(schedule.batch_size)
    total = max(1, schedule.epochs * steps_per)
    t = 0
    keys = list(theta)
    for ep in range(1, schedule.epochs + 1):
        losses = []
        for xb, yb, _ in task.epoch_batches(stream(schedule.seed, "full-train", ep),
                                            schedule.batch_size):
            lr = 0.5 * schedule.lr * (1.0 + math.cos(math.pi * t / total))
            tape = Tape()
            leaves = {k: tape.watch(theta[k], k) for k in keys}
            try:
                loss = ops.cross_entropy(full_forward(net, xb, res, leaves), yb)
                gs = grad(loss, [leaves[k] for k in keys])
                theta = sgd_step(theta, dict(zip(keys, gs)), lr)
            except NumericFault as e:
                raise NumericFault(f"epoch {ep}: {e}") from e
            losses.append(float(loss.data))
            t += 1
        trace.append(evaluate(theta, ep, float(np.mean(losses))))
    return theta, trace


# --------------------------------------------------------------------------
# fast adaptation


ARMS = ("full", "frozen_arch", "scratch")


def supernet_accuracy(net, params, x, y, res, tau):
    theta = point_theta(params)
    z = eval_arch(params, tau)
    return accuracy(lambda xb: supernet_forward(net, xb, res, theta, z), x, y)


def fast_adapt_experiment(net, W, task, epochs, cfg, objective, tau, arms=ARMS, seed=0,
                          scratch_params=None):
    """Validation accuracy per epoch for each adaptation arm.

    ``full`` adapts weights and architecture from W; ``frozen_arch`` adapts
    the weights only; ``scratch`` trains everything from a fresh
    initialization (``scratch_params``). Every arm sees the same batches.
    Returns ``{arm: [acc after 0, 1, ..., epochs epochs]}``.
    """
    for a in arms:
        if a not in ARMS:
            raise ConfigError(f"unknown arm {a!r}; choose from {ARMS}")
    res = task.resolution
    curves = {}
    for arm in arms:
        start = W if arm != "scratch" else scratch_params
        if start is None:
            raise ConfigError("the scratch arm needs scratch_params")
        params = P.clone(start)
        curve = [supernet_accuracy(net, params, task.x_val, task.y_val, res, tau)]
        steps = task.steps_per_epoch(cfg.batch_size)
        for ep in range(epochs):
            r = inner_adapt(params, _EpochTask(task, ep, seed, cfg.batch_size), cfg, objective,
                            key=("fast", seed, ep), tau=tau, steps=steps,
                            freeze_arch=(arm == "frozen_arch"), prior=start)
            params = r.params
            curve.append(supernet_accuracy(net, params, task.x_val, task.y_val, res, tau))
        curves[arm] = curve
    return curves


class _EpochTask:
    """Serves one shuffled pass over a task's training split, batch by batch."""

    def __init__(self, task, epoch, seed, batch_size):
        self.task = task
        self.n_train = task.n_train
        self._batches = list(task.epoch_batches(stream(seed, "fast-order", epoch), batch_size))
        self._i = 0

    def batch(self, rng, batch_size):
        b = self._batches[self._i % len(self._batches)]
        self._i += 1
        return b


# --------------------------------------------------------------------------
# PCA of posterior samples


@dataclass
class PCAResult:
    coords: np.ndarray
    variances: np.ndarray
    ratios: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    k: int
    warnings: list


def pca_export(samples, k, rank_tol=1e-10):
    """Mean-centred PCA of row vectors by eigendecomposition.

    With more dimensions than samples the ``n x n`` Gram matrix is
    diagonalised instead of the ``d x d`` covariance (same spectrum).
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError("samples must be a 2-d array of row vectors")
    n, d = X.shape
    if k < 1:
        raise ConfigError("k must be >= 1")
    if n < k + 1:
        raise ConfigError(f"need at least k+1={k + 1} samples, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    if d > n:
        evals, U = np.linalg.eigh(Xc @ Xc.T)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        U = U[:, order]
        keep = evals > rank_tol * max(evals[0], 1e-300)
        V = np.zeros((d, len(evals)))
        V[:, keep] = (Xc.T @ U[:, keep]) / np.sqrt(evals[keep])
    else:
        evals, V = np.linalg.eigh(Xc.T @ Xc)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        V = V[:, order]
    variances = evals / max(n - 1, 1)
    total = variances.sum()
    rank = int(np.sum(evals > rank_tol * max(evals[0], 1e-300))) if evals.size else 0
    warnings = []
    kk = k
    if rank < k:
        kk = max(rank, 1)
        warnings.append(f"rank {rank} < k={k}; reduced to k={kk}")
    # deterministic sign: largest-magnitude loading of each component positive
    for j in range(V.shape[1]):
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    comps = V[:, :kk]
    coords = Xc @ comps
    ratios = variances[:kk] / total if total > 0 else np.zeros(kk)
    return PCAResult(coords, variances[:kk], ratios, comps, mean, kk, warnings)
