"""Inner-loop adaptation and the Reptile-style meta update.

One epoch samples C tasks, adapts a copy of the meta-parameters W to each by
plain SGD on the ELBO, then moves W toward the average adapted copy:
``W <- W + lam * mean_c(A_c - W)``.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import params as P
from .errors import AdaptationFault, ConfigError, NumericFault
from .rng import stream
from .tensor import Tape, grad, sgd_step
from .variational import VariationalConfig, draw_noise, elbo_loss, temperature


@dataclass
class MetaTrainConfig:
    epochs: int = 30
    tasks_per_epoch: int = 6
    inner_steps: int = None  # None: one pass over the task's training split
    inner_lr: float = 0.05
    arch_lr: float = None  # None: same as inner_lr
    meta_lr: float = 1.0
    batch_size: int = 16
    variational: VariationalConfig = field(default_factory=VariationalConfig)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.variational, dict):
            self.variational = VariationalConfig(**self.variational)
        if self.epochs < 0 or self.tasks_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and tasks_per_epoch >= 1")
        if self.inner_steps is not None and self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0")
        if not self.inner_lr > 0 or not self.meta_lr > 0:
            raise ConfigError("inner_lr and meta_lr must be positive")
        if self.arch_lr is not None and self.arch_lr < 0:
            raise ConfigError("arch_lr must be >= 0")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1")

    @property
    def lr_arch(self):
        return self.inner_lr if self.arch_lr is None else self.arch_lr


@dataclass
class AdaptResult:
    params: dict
    losses: list
    tau: float


class ElboObjective:
    """The default inner objective: negative ELBO of the super-network."""

    def __init__(self, net, vcfg):
        self.net = net
        self.vcfg = vcfg

    def draws(self, params, rng):
        mode = self.vcfg.weight_mode
        return [draw_noise(params, rng, mode) for _ in range(self.vcfg.mc_samples)]

    def trainable(self, params):
        # raw scales never reach the graph in point mode
        if self.vcfg.weight_mode == "point":
            return [k for k in params if not k.startswith(P.S)]
        return list(params)

    def __call__(self, post, prior, batch, draws, tau, n_data):
        return elbo_loss(self.net, post, prior, batch, self.vcfg, draws, tau, n_data)


def sgd_step_roles(params, grads, lr, arch_lr):
    """SGD with a separate learning rate for architecture logits."""
    if arch_lr == lr:
        return sgd_step(params, grads, lr)
    w = {k: g for k, g in grads.items() if not k.startswith(P.ARCH)}
    a = {k: g for k, g in grads.items() if k.startswith(P.ARCH)}
    out = sgd_step(params, w, lr)
    return sgd_step(out, a, arch_lr)


def inner_adapt(W, task, cfg, objective, key=(0, 0), tau=None, steps=None,
                freeze_noise=False, freeze_arch=False, prior=None):
    """Adapt a clone of ``W`` to ``task`` with ``steps`` SGD steps; W is not touched.

    Step t draws its minibatch from stream ``(seed, "batch", *key, t)`` and
    its noise from ``(seed, "noise", *key, t)``. ``freeze_noise`` reuses the
    step-0 noise throughout. The divergence terms are taken against
    ``prior`` (default: W itself).
    """
    prior = W if prior is None else prior
    vcfg = cfg.variational
    tau = temperature(vcfg, 0) if tau is None else tau
    if steps is None:
        steps = cfg.inner_steps
    if steps is None:
        steps = task.steps_per_epoch(cfg.batch_size)
    params = P.clone(W)
    keys = objective.trainable(params)
    if freeze_arch:
        keys = [k for k in keys if not k.startswith(P.ARCH)]
    losses = []
    draws = None
    for t in range(steps):
        try:
            batch = task.batch(stream(cfg.seed, "batch", *key, t), cfg.batch_size)
            if draws is None or not freeze_noise:
                draws = objective.draws(params, stream(cfg.seed, "noise", *key, t))
            tape = Tape()
            post = dict(params)
            for k in keys:
                post[k] = tape.watch(params[k], k)
            loss = objective(post, prior, batch, draws, tau, task.n_train)
            losses.append(float(loss.data))
            gs = grad(loss, [post[k] for k in keys])
            params = sgd_step_roles(params, dict(zip(keys, gs)), cfg.inner_lr, cfg.lr_arch)
        except NumericFault as e:
            raise AdaptationFault(t, losses, e) from e
    return AdaptResult(params, losses, tau)


def meta_step(W, adapted, lam):
    """``W + lam * mean_c(A_c - W)``, summed in list order.

    With ``lam == 1`` the result is the plain mean of the adapted sets, so a
    single adapted set comes back bit-for-bit.
    """
    if not adapted:
        raise ValueError("meta_step needs at least one adapted parameter set")
    if lam < 0:
        raise ValueError("meta learning rate must be >= 0")
    for a in adapted:
        P.check_congruent(W, a)
    C = len(adapted)
    out = {}
    for k, w in W.items():
        if lam == 1:
            acc = np.array(adapted[0][k], dtype=np.float64, copy=True)
            for a in adapted[1:]:
                acc = acc + a[k]
            out[k] = acc / C
            continue
        delta = adapted[0][k] - w
        for a in adapted[1:]:
            delta = delta + (a[k] - w)
        out[k] = w + lam * (delta / C)
    return out


def _adapt_all(W, tasks, cfg, objective, epoch, tau):
    def run(i):
        return inner_adapt(W, tasks[i], cfg, objective, key=(epoch, i), tau=tau)

    if cfg.workers == 1 or len(tasks) == 1:
        return [run(i) for i in range(len(tasks))]
    with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
        # map keeps task-index order whatever the completion order
        return list(ex.map(run, range(len(tasks))))


def meta_train(W0, source, cfg, objective, sinks=(), on_epoch=None, start_epoch=0):
    """Run epochs ``start_epoch .. cfg.epochs - 1`` of meta-training.

    ``sinks`` receive one metrics dict per epoch; ``on_epoch(epoch, W)`` is
    the checkpoint hook. Returns the final W and the list of metric rows.
    """
    W = P.clone(W0)
    history = []
    for e in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        tau = temperature(cfg.variational, e)
        tasks = [source.task(e, i) for i in range(cfg.tasks_per_epoch)]
        results = _adapt_all(W, tasks, cfg, objective, e, tau)
        W = meta_step(W, [r.params for r in results], cfg.meta_lr)
        finals = [r.losses[-1] for r in results if r.losses]
        row = {
            "epoch": e,
            "tau": tau,
            "mean_final_loss": float(np.mean(finals)) if finals else float("nan"),
            "wall_seconds": time.perf_counter() - t0,
        }
        history.append(row)
        for s in sinks:
            s(row)
        if on_epoch is not None:
            on_epoch(e, W)
    return W, history
