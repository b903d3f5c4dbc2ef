"""Posterior sampling, log-densities and the per-batch ELBO loss.

Weights: ``theta = psi_mu + eps * softplus(psi_s)`` (``gaussian`` mode) or
``theta = psi_mu`` (``point`` mode). Architecture: per-edge Gumbel-softmax
samples ``z = softmax((phi + xi) / tau)``.

The architecture prior is a Gumbel-softmax (Concrete) distribution with the
meta logits and the same temperature, so the architecture term of the loss
is the single-sample log-ratio ``log q_phi(z) - log p_alpha(z)``.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import params as P
from .cells import supernet_forward
from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, ops

WEIGHT_MODES = ("point", "gaussian")
CELL_TYPES = ("normal", "reduce")
ARCH_KEY = {"normal": P.ARCH_NORMAL, "reduce": P.ARCH_REDUCE}


class BoundaryError(ValueError):
    """A Concrete density was asked for at a point on the simplex boundary."""


@dataclass
class VariationalConfig:
    tau0: float = 5.0
    tau_min: float = 0.5
    tau_decay: float = 0.08
    beta: float = 1e-3
    weight_mode: str = "point"
    mc_samples: int = 1

    def __post_init__(self):
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}, "
                              f"got {self.weight_mode!r}")
        if not (self.tau0 > 0 and self.tau_min > 0):
            raise ConfigError("temperatures must be positive")
        if self.tau_decay < 0:
            raise ConfigError("tau_decay must be >= 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")


def temperature(cfg, step):
    """``max(tau_min, tau0 * exp(-decay * step))``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return max(cfg.tau_min, cfg.tau0 * math.exp(-cfg.tau_decay * step))


# --------------------------------------------------------------------------
# sampling


def weight_names(params):
    return [k[len(P.MU):] for k in params if k.startswith(P.MU)]


def sample_weights(post, noise, mode):
    """Map posterior parameters to a ``theta`` dict keyed by bare names.

    ``post`` holds tensors or arrays under role-prefixed keys. ``noise`` maps
    bare weight names to standard-normal arrays; it is ignored in point mode
    and may be None there.
    """
    if mode not in WEIGHT_MODES:
        raise ConfigError(f"unknown weight mode {mode!r}")
    theta = {}
    for k, v in post.items():
        if k.startswith(P.PT):
            theta[k[len(P.PT):]] = as_tensor(v)
        elif k.startswith(P.MU):
            name = k[len(P.MU):]
            mu = as_tensor(v)
            if mode == "point":
                theta[name] = mu
                continue
            eps = noise[name]
            if np.shape(eps) != mu.shape:
                raise ShapeError(f"sample_weights[{name}]", mu.shape, np.shape(eps))
            sigma = ops.softplus(post[P.S + name])
            theta[name] = ops.add(mu, ops.mul(Tensor(np.asarray(eps, dtype=np.float64)), sigma))
    return theta


def sample_arch(phi, gumbel, tau):
    """Gumbel-softmax sample ``softmax((phi + gumbel) / tau)`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    phi = as_tensor(phi)
    if np.shape(gumbel) != phi.shape:
        raise ShapeError("sample_arch", phi.shape, np.shape(gumbel))
    return ops.softmax(ops.mul(ops.add(phi, Tensor(np.asarray(gumbel, dtype=np.float64))),
                               1.0 / tau), axis=-1)


def _concrete_log_density(log_z, logits, tau):
    # standard Concrete density, rows are independent simplex points
    n = log_z.shape[-1]
    const = math.lgamma(n) + (n - 1) * math.log(tau)
    rows = 1 if log_z.ndim == 1 else int(np.prod(log_z.shape[:-1]))
    body = ops.sub(logits, ops.mul(log_z, tau + 1.0))
    norm = ops.logsumexp(ops.sub(logits, ops.mul(log_z, tau)), axis=-1)
    return ops.add(ops.sub(ops.sum(body), ops.mul(ops.sum(norm), float(n))), const * rows)


def gumbel_softmax_log_density(z, phi, tau):
    """Log-density of the Concrete distribution with logits ``phi`` at ``z``.

    Rows of a 2-d ``z`` are independent points; their log-densities add up.
    Raises :class:`BoundaryError` if any component is not strictly inside
    (0, 1).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = as_tensor(z)
    phi = as_tensor(phi)
    if z.shape != phi.shape:
        raise ShapeError("gumbel_softmax_log_density", phi.shape, z.shape)
    d = z.data
    if np.any(d <= 0.0) or np.any(d >= 1.0):
        raise BoundaryError("z lies on the simplex boundary; the density is unbounded there")
    if np.any(np.abs(d.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("z is not on the probability simplex")
    return _concrete_log_density(ops.log(z), phi, tau)


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p):
    """Summed KL of diagonal Gaussians ``N(mu_q, sigma_q) || N(mu_p, sigma_p)``."""
    sigma_q = as_tensor(sigma_q)
    sigma_p = as_tensor(sigma_p)
    if np.any(sigma_q.data <= 0) or np.any(sigma_p.data <= 0):
        raise ValueError("Gaussian scales must be positive")
    ratio = ops.div(sigma_q, sigma_p)
    diff = ops.div(ops.sub(mu_q, mu_p), sigma_p)
    kl = ops.sub(ops.add(ops.mul(ops.add(ops.mul(ratio, ratio), ops.mul(diff, diff)), 0.5),
                         ops.neg(ops.log(ratio))), 0.5)
    return ops.sum(kl)


# --------------------------------------------------------------------------
# the loss


@dataclass
class Draw:
    """Frozen noise for one Monte Carlo sample."""
    eps: dict
    gumbel: dict


def draw_noise(params, rng, mode):
    """One set of ``(eps, xi)`` draws shaped like ``params``."""
    eps = None
    if mode == "gaussian":
        eps = {name: rng.standard_normal(np.shape(params[P.MU + name]))
               for name in weight_names(params)}
    gumbel = {c: rng.gumbel(size=np.shape(params[ARCH_KEY[c]])) for c in CELL_TYPES}
    return Draw(eps, gumbel)


def _weight_divergence(post, prior, mode):
    names = weight_names(prior)
    if not names:
        return Tensor(0.0)
    sig_p = {n: np.log1p(np.exp(prior[P.S + n])) for n in names}
    if mode == "point":
        # posterior scale pinned to the prior's: the KL is a scaled L2 pull
        return ops.sq_dist([post[P.MU + n] for n in names], [prior[P.MU + n] for n in names],
                           [0.5 / sig_p[n] ** 2 for n in names])
    total = None
    for n in names:
        kl = gaussian_kl(post[P.MU + n], ops.softplus(post[P.S + n]), prior[P.MU + n], sig_p[n])
        total = kl if total is None else ops.add(total, kl)
    return total


def arch_log_ratio(post, prior, gumbel, tau):
    """``log q_phi(z) - log p_alpha(z)`` at ``z`` built from ``gumbel``, plus the z dict."""
    z = {}
    total = None
    for c in CELL_TYPES:
        phi = as_tensor(post[ARCH_KEY[c]])
        y = ops.mul(ops.add(phi, Tensor(gumbel[c])), 1.0 / tau)
        log_z = ops.log_softmax(y, axis=-1)
        z[c] = ops.exp(log_z)
        # the lgamma/log-tau constants cancel in the ratio
        lq = _concrete_log_density(log_z, phi, tau)
        lp = _concrete_log_density(log_z, Tensor(prior[ARCH_KEY[c]]), tau)
        r = ops.sub(lq, lp)
        total = r if total is None else ops.add(total, r)
    return total, z


def elbo_loss(net, post, prior, batch, cfg, draws, tau, n_data=1, return_parts=False):
    """Negative ELBO for one minibatch, averaged over ``draws``.

    ``post`` maps role-prefixed names to tensors (usually tape leaves),
    ``prior`` to plain arrays. ``batch`` is ``(x, y, resolution)``. The
    divergence terms carry weight ``cfg.beta / n_data``.
    """
    x, y, res = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    if not draws:
        raise ValueError("need at least one noise draw")
    beta = cfg.beta / n_data
    total = None
    ce_total = 0.0
    for d in draws:
        theta = sample_weights(post, d.eps, cfg.weight_mode)
        ratio, z = arch_log_ratio(post, prior, d.gumbel, tau)
        ce = ops.cross_entropy(supernet_forward(net, x, res, theta, z), y)
        ce_total += float(ce.data)
        loss = ce
        if beta > 0:
            loss = ops.add(loss, ops.mul(ratio, beta))
        total = loss if total is None else ops.add(total, loss)
    total = ops.mul(total, 1.0 / len(draws))
    if beta > 0:
        total = ops.add(total, ops.mul(_weight_divergence(post, prior, cfg.weight_mode), beta))
    if return_parts:
        return total, ce_total / len(draws)
    return total


def eval_arch(params, tau):
    """Noise-free architecture sample ``softmax(phi / tau)`` for evaluation."""
    return {c: ops.softmax(ops.mul(as_tensor(params[ARCH_KEY[c]]), 1.0 / tau), axis=-1)
            for c in CELL_TYPES}


def arch_probs(params):
    """Per-edge op probabilities ``softmax(phi)`` as plain arrays."""
    out = {}
    for c in CELL_TYPES:
        a = np.asarray(params[ARCH_KEY[c]], dtype=np.float64)
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        out[c] = e / e.sum(axis=-1, keepdims=True)
    return out

