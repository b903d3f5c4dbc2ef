"""Few-shot search with unrolled inner loops, and MAML evaluation.

Here the outer gradient flows through the inner SGD steps themselves
(gradients of gradients), instead of the Reptile-style parameter averaging
used by ``meta``. ``first_order=True`` drops the second-order terms.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import params as P
from .cells import supernet_forward
from .derive import (FullNetConfig, average_probs, build_full_network, derive_from_probs,
                     full_forward, init_full_params)
from .errors import AdaptationFault, ConfigError, NumericFault
from .rng import stream
from .tasks import sample_episode
from .tensor import Tape, Tensor, grad, no_record, ops, sgd_step
from .variational import ARCH_KEY, CELL_TYPES, sample_arch, sample_weights


@dataclass
class FewShotConfig:
    n_way: int = 5
    k_shot: int = 5
    query_per_way: int = 5
    tasks_per_update: int = 2
    search_inner_steps: int = 1
    eval_inner_steps: int = 5
    inner_lr: float = 0.1
    arch_lr: float = None
    meta_lr: float = 0.01
    search_iterations: int = 500
    eval_iterations: int = 100
    eval_episodes: int = 200
    derive_episodes: int = 4
    first_order: bool = False
    softmax_arch: bool = False
    tau: float = 1.0
    resolution: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("n_way", "k_shot", "query_per_way", "tasks_per_update"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("search_inner_steps", "eval_inner_steps", "search_iterations",
                     "eval_iterations", "derive_episodes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if not (self.inner_lr >= 0 and self.meta_lr >= 0 and self.tau > 0):
            raise ConfigError("learning rates must be >= 0 and tau > 0")

    @property
    def lr_arch(self):
        return self.inner_lr if self.arch_lr is None else self.arch_lr


def _lr_for(lr, key):
    return lr[key] if isinstance(lr, dict) else lr


def _array(v):
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def _sgd(params, grads, lr):
    if not isinstance(lr, dict):
        return sgd_step(params, grads, lr)
    out = dict(params)
    for rate in sorted(set(lr[k] for k in grads)):
        out = sgd_step(out, {k: g for k, g in grads.items() if lr[k] == rate}, rate)
    return out


def maml_adapt(params, loss_fn, x, y, steps, lr, track_graph=False):
    """``steps`` SGD steps of ``loss_fn(params, x, y)`` on a support set.

    With ``track_graph`` the params must be tensors on a tape and the
    updates are recorded, so a later outer gradient sees through them. ``lr``
    is a float or a per-key dict. Returns a dict of the same kind as given
    (tensors when tracking, arrays otherwise).
    """
    if len(y) == 0:
        raise ValueError("empty support set")
    keys = list(params)
    cur = dict(params)
    for t in range(steps):
        try:
            if track_graph:
                loss = loss_fn(cur, x, y)
                gs = grad(loss, [cur[k] for k in keys], create_graph=True)
                cur = {k: ops.sub(cur[k], ops.mul(g, _lr_for(lr, k))) for k, g in zip(keys, gs)}
                for k in keys:
                    if not np.all(np.isfinite(cur[k].data)):
                        raise NumericFault(f"non-finite parameter {k!r}")
            else:
                tape = Tape()
                leaves = {k: tape.watch(cur[k], k) for k in keys}
                loss = loss_fn(leaves, x, y)
                gs = grad(loss, [leaves[k] for k in keys])
                cur = _sgd({k: _array(cur[k]) for k in keys}, dict(zip(keys, gs)), lr)
        except NumericFault as e:
            raise AdaptationFault(t, [], e) from e
    return cur


def maml_meta_step(params, episodes, cfg, loss_for, inner_steps=None, lr=None):
    """One outer SGD step on the mean query loss of the adapted params.

    ``loss_for(j)`` returns the loss callable ``(theta, x, y)`` used for
    episode j (so each episode can carry its own frozen noise).
    """
    if not episodes:
        raise ValueError("need at least one episode")
    steps = cfg.search_inner_steps if inner_steps is None else inner_steps
    lr = cfg.inner_lr if lr is None else lr
    keys = list(params)
    n = len(episodes)
    if cfg.first_order:
        total = {k: np.zeros(np.shape(params[k])) for k in keys}
        for j, ep in enumerate(episodes):
            f = loss_for(j)
            adapted = maml_adapt(params, f, ep.support_x, ep.support_y, steps, lr, False)
            tape = Tape()
            leaves = {k: tape.watch(adapted[k], k) for k in keys}
            q = f(leaves, ep.query_x, ep.query_y)
            for k, g in zip(keys, grad(q, [leaves[k] for k in keys])):
                total[k] = total[k] + g.data
        grads = {k: total[k] / n for k in keys}
    else:
        tape = Tape()
        leaves = {k: tape.watch(params[k], k) for k in keys}
        loss = None
        for j, ep in enumerate(episodes):
            f = loss_for(j)
            adapted = maml_adapt(leaves, f, ep.support_x, ep.support_y, steps, lr, True)
            q = f(adapted, ep.query_x, ep.query_y)
            loss = q if loss is None else ops.add(loss, q)
        loss = ops.mul(loss, 1.0 / n)
        grads = dict(zip(keys, grad(loss, [leaves[k] for k in keys])))
    return sgd_step({k: _array(params[k]) for k in keys}, grads, cfg.meta_lr)


# --------------------------------------------------------------------------
# search on the super-network


def _search_loss(net, cfg, gumbel):
    def f(post, x, y):
        theta = sample_weights(post, None, "point")
        if cfg.softmax_arch:
            z = {c: ops.softmax(post[ARCH_KEY[c]], axis=-1) for c in CELL_TYPES}
        else:
            z = {c: sample_arch(post[ARCH_KEY[c]], gumbel[c], cfg.tau) for c in CELL_TYPES}
        return ops.cross_entropy(supernet_forward(net, x, cfg.resolution, theta, z), y)
    return f


def _trainable(W):
    # point-mode posterior: raw scales never enter the loss
    return {k: v for k, v in W.items() if not k.startswith(P.S)}


def _episode(corpus, cfg, classes, *key):
    return sample_episode(corpus, cfg.n_way, cfg.k_shot, cfg.query_per_way,
                          stream(cfg.seed, *key), classes=classes, resolution=cfg.resolution)


def _gumbel(W, cfg, *key):
    rng = stream(cfg.seed, *key)
    return {c: rng.gumbel(size=np.shape(W[ARCH_KEY[c]])) for c in CELL_TYPES}


def fewshot_search(net, W0, corpus, train_classes, cfg, sinks=()):
    """Unrolled architecture search over training-class episodes.

    Returns ``(W, genotype, averaged probabilities)``. The genotype is
    derived from ``softmax(phi)`` averaged over ``derive_episodes`` adapted
    copies; with zero search iterations no search happened and the prior
    logits are committed directly.
    """
    if cfg.n_way > net.n_classes:
        raise ConfigError(f"{cfg.n_way}-way episodes need a {cfg.n_way}-class head")
    W = P.clone(W0)
    fixed = {k: v for k, v in W.items() if k.startswith(P.S)}
    lrs = {k: (cfg.lr_arch if k.startswith(P.ARCH) else cfg.inner_lr) for k in W}
    for it in range(cfg.search_iterations):
        eps = [_episode(corpus, cfg, train_classes, "fs-episode", it, j)
               for j in range(cfg.tasks_per_update)]
        noise = [_gumbel(W, cfg, "fs-noise", it, j) for j in range(cfg.tasks_per_update)]
        trainable = _trainable(W)
        new = maml_meta_step(trainable, eps, cfg, lambda j: _search_loss(net, cfg, noise[j]),
                             lr=lrs)
        W = {**new, **fixed}
        for s in sinks:
            s({"iteration": it})
    if cfg.search_iterations == 0 or cfg.derive_episodes == 0:
        probs = average_probs([W])
    else:
        adapted = []
        for j in range(cfg.derive_episodes):
            ep = _episode(corpus, cfg, train_classes, "fs-derive", j)
            f = _search_loss(net, cfg, _gumbel(W, cfg, "fs-derive-noise", j))
            a = maml_adapt(_trainable(W), f, ep.support_x, ep.support_y,
                           cfg.search_inner_steps, lrs)
            adapted.append(a)
        probs = average_probs(adapted)
    prov = {"search_iterations": cfg.search_iterations, "seed": cfg.seed}
    return W, derive_from_probs(probs, prov), probs


# --------------------------------------------------------------------------
# evaluation of a fixed genotype


@dataclass
class FewShotResult:
    mean: float
    ci95: float
    accuracies: list
    episodes: int


def _full_loss(net, res):
    def f(theta, x, y):
        return ops.cross_entropy(full_forward(net, x, res, theta), y)
    return f


def fewshot_eval(genotype, corpus, train_classes, test_classes, cfg, net_cfg=None,
                 shuffle_labels=False):
    """MAML-train a full network on training classes, then score test episodes.

    Returns the mean query accuracy over ``cfg.eval_episodes`` test episodes
    with a normal-approximation 95% interval.
    """
    overlap = set(train_classes) & set(test_classes)
    if overlap:
        raise ConfigError(f"test classes overlap training classes: {sorted(overlap)}")
    net_cfg = net_cfg or FullNetConfig(cells=3, channels=8, n_classes=cfg.n_way,
                                       heads={cfg.resolution: 1}, seed=cfg.seed)
    if net_cfg.n_classes != cfg.n_way:
        raise ConfigError("full network class count must equal n_way")
    net = build_full_network(genotype, net_cfg)
    theta = init_full_params(net, cfg.seed)
    f = _full_loss(net, cfg.resolution)
    for it in range(cfg.eval_iterations):
        eps = [_episode(corpus, cfg, train_classes, "fe-episode", it, j)
               for j in range(cfg.tasks_per_update)]
        theta = maml_meta_step(theta, eps, cfg, lambda j: f, inner_steps=cfg.eval_inner_steps)
    accs = []
    for j in range(cfg.eval_episodes):
        ep = sample_episode(corpus, cfg.n_way, cfg.k_shot, cfg.query_per_way,
                            stream(cfg.seed, "fe-test", j), classes=test_classes,
                            resolution=cfg.resolution, shuffle_labels=shuffle_labels)
        adapted = maml_adapt(theta, f, ep.support_x, ep.support_y, cfg.eval_inner_steps,
                             cfg.inner_lr)
        with no_record():
            logits = full_forward(net, ep.query_x, cfg.resolution, adapted).data
        accs.append(float(np.mean(np.argmax(logits, axis=1) == ep.query_y)))
    accs = np.asarray(accs)
    n = len(accs)
    ci = 1.96 * float(accs.std(ddof=1)) / math.sqrt(n) if n > 1 else float("nan")
    return FewShotResult(float(accs.mean()), ci, accs.tolist(), n)
