import numpy as np
import pytest

from basenas.errors import GraphError, NumericFault, ShapeError
from basenas.tensor import Tape, Tensor, grad, is_recording, no_record, ops, sgd_step
from basenas.tensor import kernels

from conftest import fd_check


def _grad_of(f, x):
    tape = Tape()
    t = tape.watch(x)
    (g,) = grad(f(t), [t])
    return g.data


def _scalar(f):
    def run(a):
        with no_record():
            return float(f(Tensor(a)).data)
    return run


UNARY = [
    ("exp", lambda t: ops.sum(ops.exp(t))),
    ("log", lambda t: ops.sum(ops.log(ops.add(ops.mul(t, t), 1.0)))),
    ("sigmoid", lambda t: ops.sum(ops.mul(ops.sigmoid(t), t))),
    ("softplus", lambda t: ops.sum(ops.softplus(t))),
    ("relu", lambda t: ops.sum(ops.mul(ops.relu(t), t))),
    ("power", lambda t: ops.sum(ops.power(ops.add(ops.mul(t, t), 1.0), 1.5))),
    ("softmax", lambda t: ops.sum(ops.mul(ops.softmax(t, axis=-1), t))),
    ("log_softmax", lambda t: ops.sum(ops.mul(ops.log_softmax(t, axis=0), t))),
    ("logsumexp", lambda t: ops.sum(ops.logsumexp(t, axis=1))),
    ("mean", lambda t: ops.mean(ops.mul(t, t), axis=0).sum()),
    ("transpose", lambda t: ops.sum(ops.mul(ops.transpose(t), ops.transpose(t)) * 0.5)),
    ("take", lambda t: ops.sum(ops.mul(t[1:, ::2], t[1:, ::2]))),
    ("div", lambda t: ops.sum(ops.div(t, ops.add(ops.mul(t, t), 2.0)))),
]


@pytest.mark.parametrize("name,f", UNARY, ids=[u[0] for u in UNARY])
def test_unary_gradients_match_fd(name, f, rng):
    x = rng.normal(size=(3, 4))
    worst, probed, _ = fd_check(_scalar(f), x, _grad_of(f, x))
    assert probed > 6
    assert worst < 1e-7


def test_matmul_and_linear_gradients(rng):
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=5)
    x = rng.normal(size=(3, 4))

    def f(t):
        return ops.sum(ops.mul(ops.linear(t, Tensor(w), Tensor(b)), ops.linear(t, Tensor(w))))

    worst, _, _ = fd_check(_scalar(f), x, _grad_of(f, x))
    assert worst < 1e-7


def test_broadcasting_gradients_sum_back(rng):
    a = rng.normal(size=(3, 1))
    b = rng.normal(size=(1, 4))
    tape = Tape()
    ta, tb = tape.watch(a), tape.watch(b)
    ga, gb = grad(ops.sum(ops.mul(ta, tb)), [ta, tb])
    np.testing.assert_allclose(ga.data, np.full((3, 1), b.sum()))
    np.testing.assert_allclose(gb.data, np.full((1, 4), a.sum()))


def test_cross_entropy_matches_hand_formula(rng):
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 2])
    with no_record():
        ce = float(ops.cross_entropy(Tensor(z), y).data)
    lse = np.log(np.exp(z).sum(1))
    assert ce == pytest.approx(np.mean(lse - z[np.arange(4), y]), rel=1e-13)
    g = _grad_of(lambda t: ops.cross_entropy(t, y), z)
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    p[np.arange(4), y] -= 1
    np.testing.assert_allclose(g, p / 4, atol=1e-14)


def _naive_conv(x, w, stride, pad, dil, groups):
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    og = O // groups
    for b in range(B):
        for o in range(O):
            g = o // og
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(Cg):
                        for u in range(kh):
                            for v in range(kw):
                                s += w[o, c, u, v] * xp[b, g * Cg + c, i * stride + u * dil,
                                                        j * stride + v * dil]
                    out[b, o, i, j] = s
    return out


CONV_CASES = [
    # (C_in, C_out, k, stride, pad, dilation, groups)
    (2, 3, 3, 1, 1, 1, 1),
    (4, 4, 3, 2, 1, 1, 4),
    (4, 4, 5, 1, 4, 2, 4),
    (2, 4, 1, 2, 0, 1, 1),
    (3, 3, 3, 2, 2, 2, 3),
]


@pytest.mark.parametrize("backend", ["numba", "numpy"])
@pytest.mark.parametrize("case", CONV_CASES)
def test_conv_kernels_match_loop_oracle(case, backend, rng):
    ci, co, k, s, p, d, g = case
    x = rng.normal(size=(2, ci, 7, 6))
    w = rng.normal(size=(co, ci // g, k, k))
    ref = _naive_conv(x, w, s, p, d, g)
    y = kernels.conv2d(x, w, (s, s), (p, p), (d, d), g, backend=backend)
    np.testing.assert_allclose(y, ref, atol=1e-12)
    # adjoint identities: <conv(x), gy> == <x, conv_in(gy)> == <w, conv_w(x, gy)>
    gy = rng.normal(size=y.shape)
    gx = kernels.conv2d_input_grad(gy, w, x.shape[2:], (s, s), (p, p), (d, d), g,
                                   backend=backend)
    gw = kernels.conv2d_weight_grad(x, gy, (k, k), (s, s), (p, p), (d, d), g, backend=backend)
    lhs = float(np.sum(ref * gy))
    assert float(np.sum(x * gx)) == pytest.approx(lhs, rel=1e-11, abs=1e-11)
    assert float(np.sum(w * gw)) == pytest.approx(lhs, rel=1e-11, abs=1e-11)


def test_conv2d_op_gradients(rng):
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))

    def fx(t):
        y = ops.conv2d(t, Tensor(w), stride=2, padding=1)
        return ops.sum(ops.mul(y, y))

    def fw(t):
        y = ops.conv2d(Tensor(x), t, stride=1, padding=2, dilation=2)
        return ops.sum(ops.mul(y, y))

    assert fd_check(_scalar(fx), x, _grad_of(fx, x), n=30)[0] < 1e-7
    assert fd_check(_scalar(fw), w, _grad_of(fw, w), n=30)[0] < 1e-7


def test_conv_second_order_gradient(rng):
    # d/dw of (d loss / dx . v) through the conv adjoint trio
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(2, 2, 3, 3))
    v = rng.normal(size=x.shape)

    def inner(wt, xv):
        tape = Tape()
        tw = tape.watch(wt)
        tx = tape.watch(xv)
        y = ops.conv2d(tx, tw, padding=1)
        loss = ops.sum(ops.mul(y, y))
        (gx,) = grad(loss, [tx], create_graph=True)
        return ops.sum(ops.mul(gx, Tensor(v))), tw

    h, tw = inner(w, x)
    (gw,) = grad(h, [tw])

    def scalar(wv):
        return float(inner(wv, x)[0].data)

    assert fd_check(scalar, w, gw.data, n=20)[0] < 1e-6


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_maxpool_argmax_backends(backend, rng):
    x = rng.normal(size=(2, 3, 7, 7))
    idx = kernels.maxpool_argmax(x, 3, 2, 1, backend=backend)
    ref = kernels.maxpool_argmax(x, 3, 2, 1, backend="numpy")
    np.testing.assert_array_equal(idx, ref)


def test_max_pool_values_and_gradient(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    with no_record():
        y = ops.max_pool2d(Tensor(x), 3, 1, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    ref = np.array([[[[xp[0, c, i:i + 3, j:j + 3].max() for j in range(6)] for i in range(6)]
                     for c in range(2)]])
    np.testing.assert_array_equal(y, ref)

    def f(t):
        return ops.sum(ops.mul(ops.max_pool2d(t, 3, 2, 1), ops.max_pool2d(t, 3, 2, 1)))

    worst, probed, _ = fd_check(_scalar(f), x, _grad_of(f, x))
    assert probed > 40 and worst < 1e-7


def test_avg_pool_excludes_padding(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    with no_record():
        y = ops.avg_pool2d(Tensor(x), 3, 1, 1).data
    assert y[0, 0, 0, 0] == pytest.approx(x[0, 0, :2, :2].mean(), rel=1e-14)
    assert y[0, 0, 1, 1] == pytest.approx(x[0, 0, :3, :3].mean(), rel=1e-14)

    def f(t):
        return ops.sum(ops.mul(ops.avg_pool2d(t, 3, 2, 1), t[:, :, ::2, ::2]))

    assert fd_check(_scalar(f), x, _grad_of(f, x))[0] < 1e-7


def test_batch_norm_normalizes_and_differentiates(rng):
    x = rng.normal(2.0, 3.0, size=(4, 3, 2, 2))
    g = rng.normal(size=3)
    b = rng.normal(size=3)
    with no_record():
        y = ops.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def f(t):
        out = ops.batch_norm(t, Tensor(g), Tensor(b))
        return ops.sum(ops.mul(out, ops.exp(ops.mul(out, 0.3))))

    assert fd_check(_scalar(f), x, _grad_of(f, x), n=30)[0] < 1e-6


def test_mix_and_sq_dist(rng):
    xs = [rng.normal(size=(2, 3)) for _ in range(3)]
    w = rng.dirichlet(np.ones(3))
    with no_record():
        m = ops.mix(Tensor(w), [Tensor(a) for a in xs]).data
        d = float(ops.sq_dist([Tensor(a) for a in xs], xs[::-1], [0.5, 1.0, 2.0]).data)
    np.testing.assert_allclose(m, sum(wi * a for wi, a in zip(w, xs)), atol=1e-15)
    ref = sum(c * np.sum((a - b) ** 2) for c, a, b in zip([0.5, 1.0, 2.0], xs, xs[::-1]))
    assert d == pytest.approx(ref, rel=1e-13)
    g = _grad_of(lambda t: ops.sum(ops.mul(ops.mix(t, [Tensor(a) for a in xs]),
                                           Tensor(xs[0]))), w)
    np.testing.assert_allclose(g, [np.sum(a * xs[0]) for a in xs], atol=1e-13)


def test_second_derivative_of_cubic():
    tape = Tape()
    x = tape.watch(np.array(1.5))
    y = ops.mul(ops.mul(x, x), x)
    (g,) = grad(y, [x], create_graph=True)
    (h,) = grad(g, [x])
    assert g.data == pytest.approx(3 * 1.5 ** 2)
    assert h.data == pytest.approx(6 * 1.5)


def test_grad_wrt_intermediate():
    tape = Tape()
    x = tape.watch(np.array([1.0, 2.0]))
    mid = ops.mul(x, 3.0)
    loss = ops.sum(ops.mul(mid, mid))
    (g,) = grad(loss, [mid])
    np.testing.assert_allclose(g.data, 2 * mid.data)


def test_consumed_tape_and_foreign_tensors():
    tape = Tape()
    x = tape.watch(np.ones(2))
    loss = ops.sum(ops.mul(x, x))
    grad(loss, [x])
    with pytest.raises(GraphError):
        grad(loss, [x])
    other = Tape().watch(np.ones(2))
    with pytest.raises(GraphError):
        ops.add(tape.watch(np.ones(2)) if not tape.consumed else Tape().watch(np.ones(2)), other)


def test_non_scalar_loss_rejected():
    tape = Tape()
    x = tape.watch(np.ones(2))
    with pytest.raises(ShapeError):
        grad(ops.mul(x, 2.0), [x])


def test_non_finite_output_raises():
    with pytest.raises(NumericFault), np.errstate(divide="ignore"):
        ops.log(Tensor(np.array([0.0, 1.0])))


def test_no_record_is_reentrant():
    assert is_recording()
    with no_record():
        with no_record():
            assert not is_recording()
        assert not is_recording()
    assert is_recording()
    tape = Tape()
    x = tape.watch(np.ones(3))
    with no_record():
        y = ops.mul(x, 2.0)
    assert not y.tracked


def test_sgd_step():
    p = {"a": np.array([1.0, 2.0]), "b": np.array(3.0)}
    out = sgd_step(p, {"a": np.array([0.5, -1.0])}, 0.1)
    np.testing.assert_array_equal(out["a"], np.array([1.0, 2.0]) - 0.1 * np.array([0.5, -1.0]))
    assert out["b"] is p["b"]
    with pytest.raises(NumericFault):
        sgd_step(p, {"a": np.array([np.nan, 0.0])}, 0.1)
    with pytest.raises(ShapeError):
        sgd_step(p, {"a": np.zeros(3)}, 0.1)
    with pytest.raises(ValueError):
        sgd_step(p, {}, -1.0)
