import numpy as np
import pytest

from basenas import cells, params as P
from basenas.cells import (EDGES, N_EDGES, NUM_OPS, OP_NAMES, OpKind, build_supernet,
                           full_reduce_positions, init_params, op_param_shapes,
                           search_reduce_positions, supernet_forward)
from basenas.errors import ConfigError, ShapeError
from basenas.tensor import Tensor, no_record


def test_edge_inventory():
    assert N_EDGES == 14
    assert all(i < k for i, k in EDGES)
    assert [sum(1 for _, k in EDGES if k == n) for n in range(2, 6)] == [2, 3, 4, 5]


def test_op_codes_are_stable():
    assert NUM_OPS == 10
    assert OP_NAMES[OpKind.NONE] == "none"
    assert OpKind.from_label("skip_connect") == OpKind.SKIP_CONNECT
    with pytest.raises(ValueError):
        OpKind.from_label("conv_9x9")


def test_reduce_motifs():
    assert full_reduce_positions(20) == (6, 13)
    assert full_reduce_positions(14) == (4, 9)
    assert search_reduce_positions(4) == (1, 3)


def test_param_shapes_by_op():
    assert op_param_shapes(OpKind.MAX_POOL_3X3, 8, 1) == []
    assert op_param_shapes(OpKind.SKIP_CONNECT, 8, 1) == []
    assert len(op_param_shapes(OpKind.SKIP_CONNECT, 8, 2)) == 4
    shapes = dict((n, s) for n, s, _ in op_param_shapes(OpKind.SEP_CONV_5X5, 8, 1))
    assert shapes["dw1"] == (8, 1, 5, 5) and shapes["pw2"] == (8, 8, 1, 1)


def test_init_params_roles_and_determinism():
    net = build_supernet(cells=2, channels=4, n_classes=3, heads={16: 1})
    a = init_params(net, 7)
    b = init_params(net, 7)
    assert P.bitwise_equal(a, b)
    assert not P.bitwise_equal(a, init_params(net, 8))
    assert a[P.ARCH_NORMAL].shape == (N_EDGES, NUM_OPS)
    assert np.all(a[P.ARCH_NORMAL] == 0)
    for k in a:
        if k.startswith(P.S):
            assert P.MU + k[len(P.S):] in a
    sig = np.log1p(np.exp(a[next(k for k in a if k.startswith(P.S))]))
    np.testing.assert_allclose(sig, 0.01)


def test_supernet_forward_shapes_per_head(rng):
    net = build_supernet(cells=2, channels=4, n_classes=3, heads={16: 1, 32: 2})
    W = init_params(net, 0)
    theta = cells.point_theta(W)
    z = {c: Tensor(np.full((N_EDGES, NUM_OPS), 1.0 / NUM_OPS)) for c in ("normal", "reduce")}
    with no_record():
        for res in (16, 32):
            out = supernet_forward(net, rng.uniform(size=(2, 1, res, res)), res, theta, z)
            assert out.shape == (2, 3)
            assert np.all(np.isfinite(out.data))
    with pytest.raises(ConfigError):
        supernet_forward(net, rng.uniform(size=(2, 1, 8, 8)), 8, theta, z)
    with pytest.raises(ShapeError):
        supernet_forward(net, rng.uniform(size=(2, 1, 16, 17)), 16, theta, z)


def test_one_hot_edge_equals_single_op(rng):
    net = build_supernet(cells=2, channels=4, n_classes=3, heads={16: 1})
    W = init_params(net, 1)
    theta = cells.point_theta(W)
    x = Tensor(rng.normal(size=(2, 4, 8, 8)))
    for kind in OpKind:
        z = np.zeros(NUM_OPS)
        z[kind] = 1.0
        with no_record():
            mixed = cells.mixed_edge_forward(x, Tensor(z), theta, "cells.0.e3", 1).data
            single = cells.op_forward(kind, x, theta, f"cells.0.e3.{OP_NAMES[kind]}", 1).data
        np.testing.assert_array_equal(mixed, single)


def test_mixed_edge_rejects_off_simplex(rng):
    net = build_supernet(cells=2, channels=4, n_classes=3, heads={16: 1})
    theta = cells.point_theta(init_params(net, 1))
    x = Tensor(rng.normal(size=(1, 4, 8, 8)))
    with pytest.raises(ValueError):
        cells.mixed_edge_forward(x, Tensor(np.full(NUM_OPS, 0.2)), theta, "cells.0.e0", 1)


@pytest.mark.parametrize("bad", [dict(cells=1), dict(channels=3), dict(heads={})])
def test_supernet_config_errors(bad):
    kw = dict(cells=2, channels=4, n_classes=3, heads={16: 1})
    kw.update(bad)
    with pytest.raises(ConfigError):
        build_supernet(**kw)
