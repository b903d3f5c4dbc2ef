"""Flat parameter sets.

Meta-parameters and posteriors are plain ``dict[str, np.ndarray]`` with a
role prefix on every key:

``mu:<name>``  Gaussian mean of a cell-op weight
``s:<name>``   raw scale of that weight (sigma = softplus(s))
``pt:<name>``  point-estimated parameter (heads, preprocessing, BN, classifier)
``arch:normal`` / ``arch:reduce``  architecture logits, shape (edges, ops)
"""
import hashlib

import numpy as np

from .errors import ShapeError

MU, S, PT, ARCH = "mu:", "s:", "pt:", "arch:"
ARCH_NORMAL = "arch:normal"
ARCH_REDUCE = "arch:reduce"


def clone(params):
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}


def params_hash(params):
    h = hashlib.sha256()
    for k in sorted(params):
        v = np.require(params[k], dtype=np.float64, requirements="C")
        h.update(k.encode("utf-8"))
        h.update(repr(v.shape).encode("ascii"))
        h.update(v.tobytes())
    return h.hexdigest()


def check_congruent(a, b):
    if a.keys() != b.keys():
        missing = sorted(set(a) ^ set(b))[:3]
        raise ShapeError("congruence", "identical parameter names", f"differences {missing}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ShapeError(f"congruence[{k}]", np.shape(a[k]), np.shape(b[k]))


def bitwise_equal(a, b):
    if a.keys() != b.keys():
        return False
    return all(np.shape(a[k]) == np.shape(b[k]) and
               np.asarray(a[k]).tobytes() == np.asarray(b[k]).tobytes() for k in a)


def count(params):
    return int(sum(np.size(v) for v in params.values()))


def arch_keys(params):
    return [k for k in params if k.startswith(ARCH)]


def flatten(params, prefix=None):
    keys = [k for k in params if prefix is None or k.startswith(prefix)]
    if not keys:
        return np.zeros(0)
    return np.concatenate([np.ravel(params[k]) for k in keys])
