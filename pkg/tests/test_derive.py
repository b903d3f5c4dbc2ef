import itertools

import numpy as np
import pytest

from basenas import cells, params as P
from basenas import tasks as T
from basenas.cells import EDGES, N_INPUTS, N_NODES, NUM_OPS, OpKind, edge_index
from basenas.derive import (FullNetConfig, Genotype, TrainSchedule, average_probs,
                            build_full_network, derive_from_probs, fast_adapt_experiment,
                            full_forward, init_full_params, pca_export, train_full,
                            uniform_genotype)
from basenas.errors import ConfigError, DerivationError, FormatError
from basenas.meta import ElboObjective, MetaTrainConfig
from basenas.rng import stream
from basenas.tensor import Tensor, no_record
from basenas.variational import VariationalConfig


def _softmax(a):
    e = np.exp(a - a.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _brute_force_cell(p):
    # exhaustive search over input pairs and op pairs for the best total mass
    nodes = []
    for node in range(N_INPUTS, N_INPUTS + N_NODES):
        best = None
        for i, j in itertools.combinations(range(node), 2):
            for oi in range(NUM_OPS - 1):
                for oj in range(NUM_OPS - 1):
                    s = p[edge_index(i, node), oi] + p[edge_index(j, node), oj]
                    if best is None or s > best[0]:
                        best = (s, ((i, oi), (j, oj)))
        nodes.append(tuple((a, OpKind(o)) for a, o in best[1]))
    return tuple(nodes)


def test_derivation_matches_brute_force():
    rng = stream(0, "brute")
    for _ in range(100):
        probs = {c: _softmax(rng.normal(size=(14, NUM_OPS)) * 2) for c in ("normal", "reduce")}
        g = derive_from_probs(probs)
        assert g.normal == _brute_force_cell(probs["normal"])
        assert g.reduce == _brute_force_cell(probs["reduce"])


def test_derivation_is_shift_invariant_in_logits():
    rng = stream(1, "shift")
    phi = rng.normal(size=(14, NUM_OPS))
    a = derive_from_probs({"normal": _softmax(phi), "reduce": _softmax(phi)})
    b = derive_from_probs({"normal": _softmax(phi + 7.5), "reduce": _softmax(phi - 3.0)})
    assert a == b


def test_one_hot_skip_gives_all_skip():
    p = np.zeros((14, NUM_OPS))
    p[:, OpKind.SKIP_CONNECT] = 1.0
    g = derive_from_probs({"normal": p, "reduce": p})
    for kind in ("normal", "reduce"):
        assert all(op == OpKind.SKIP_CONNECT for pairs in g.cell(kind) for _, op in pairs)
        # equal strengths: lowest input indices win
        assert [tuple(s for s, _ in pairs) for pairs in g.cell(kind)] == [(0, 1)] * N_NODES


def test_degenerate_none_mass_raises():
    p = np.zeros((14, NUM_OPS))
    p[:, OpKind.NONE] = 1.0
    with pytest.raises(DerivationError):
        derive_from_probs({"normal": p, "reduce": p})
    with pytest.raises(ConfigError):
        derive_from_probs({"normal": np.ones((3, 3)), "reduce": p})


def test_average_probs_is_mean_of_softmax():
    rng = stream(2, "avg")
    sets = [{P.ARCH_NORMAL: rng.normal(size=(14, NUM_OPS)),
             P.ARCH_REDUCE: rng.normal(size=(14, NUM_OPS))} for _ in range(3)]
    avg = average_probs(sets)
    ref = np.mean([_softmax(s[P.ARCH_NORMAL]) for s in sets], axis=0)
    np.testing.assert_allclose(avg["normal"], ref, rtol=1e-14)
    np.testing.assert_allclose(avg["reduce"].sum(-1), 1.0, rtol=1e-14)


def test_genotype_text_round_trip():
    rng = stream(3, "txt")
    probs = {c: _softmax(rng.normal(size=(14, NUM_OPS))) for c in ("normal", "reduce")}
    g = derive_from_probs(probs, {"tasks": 3})
    back = Genotype.from_text(g.to_text())
    assert back == g and back.digest() == g.digest()
    assert back.provenance == {"tasks": "3"}
    with pytest.raises(FormatError):
        Genotype.from_text("nonsense\n")
    bad = g.to_text().replace("normal\n  2: 0", "normal\n  2: 1", 1)
    with pytest.raises(FormatError):
        Genotype.from_text(bad)


def test_full_network_matches_supernet_with_one_hot_arch():
    g = derive_from_probs({c: _softmax(stream(4, c).normal(size=(14, NUM_OPS)) * 3)
                           for c in ("normal", "reduce")})
    snet = cells.build_supernet(cells=2, channels=4, n_classes=3, heads={16: 1})
    W = cells.init_params(snet, 5)
    theta = cells.point_theta(W)
    fnet = build_full_network(g, FullNetConfig(cells=2, channels=4, n_classes=3, heads={16: 1},
                                               reduce_positions=(1,)))
    assert {s.name for s in fnet.specs} <= set(theta)
    z = {}
    for kind in ("normal", "reduce"):
        m = np.zeros((14, NUM_OPS))
        m[:, OpKind.NONE] = 1.0
        for e, op in g.edges(kind).items():
            m[e] = 0.0
            m[e, op] = 1.0
        z[kind] = Tensor(m)
    x = stream(6, "x").uniform(size=(3, 1, 16, 16))
    with no_record():
        a = cells.supernet_forward(snet, x, 16, theta, z).data
        b = full_forward(fnet, x, 16, {s.name: theta[s.name] for s in fnet.specs}).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def _count(op, channels=4, n_classes=3):
    net = build_full_network(uniform_genotype(op), FullNetConfig(
        cells=2, channels=channels, n_classes=n_classes, heads={16: 1}, reduce_positions=(1,)))
    return net.param_count()


def test_param_count_closed_form():
    C, K = 4, 3
    stem = C * 9 + 2 * C
    pre = (C * C + 2 * C) * 2 + (2 * C * C + 4 * C) + (2 * C * 4 * C + 4 * C)
    head = K * 8 * C + K

    def sep(c, k):
        return 2 * (c * k * k + c * c + 2 * c)

    assert _count(OpKind.MAX_POOL_3X3) == stem + pre + head
    assert _count(OpKind.SEP_CONV_3X3) == stem + pre + head + 8 * sep(C, 3) + 8 * sep(2 * C, 3)
    # skip edges leaving a reduce cell's inputs become factorized reductions:
    # uniform genotype has three such edges (0->2, 1->2, 1->3)
    fr = 2 * (C * 2 * C) + 2 * (2 * C)
    assert _count(OpKind.SKIP_CONNECT) == stem + pre + head + 3 * fr


def test_full_network_reduce_motif():
    net = build_full_network(uniform_genotype(OpKind.SKIP_CONNECT), FullNetConfig(cells=20))
    assert [p.index for p in net.plans if p.reduce] == [6, 13]
    with pytest.raises(ConfigError):
        FullNetConfig(channels=3)


@pytest.fixture(scope="module")
def toy_task():
    corpus = T.generate_synthetic_corpus(0, classes=4, per_class=20, size=16)
    spec = T.sample_task(corpus, 2, 16, stream(0, "toy"), family="A")
    return T.task_data(corpus, spec)


def _small_full(op=OpKind.AVG_POOL_3X3):
    net = build_full_network(uniform_genotype(op), FullNetConfig(
        cells=2, channels=4, n_classes=2, heads={16: 1}, reduce_positions=(1,)))
    return net, init_full_params(net, 0)


def test_train_full_zero_lr_is_flat(toy_task):
    net, theta = _small_full()
    out, trace = train_full(net, theta, toy_task, TrainSchedule(epochs=2, lr=0.0, batch_size=8))
    assert P.bitwise_equal(out, theta)
    assert len({r["val_acc"] for r in trace}) == 1
    assert len(trace) == 3 and np.isnan(trace[0]["loss"])


def test_train_full_learns_separable_task_and_is_deterministic(toy_task):
    net, theta = _small_full()
    sched = TrainSchedule(epochs=6, lr=0.1, batch_size=8)
    a, trace = train_full(net, theta, toy_task, sched)
    assert trace[-1]["train_acc"] == 1.0
    assert trace[-1]["loss"] < trace[1]["loss"]
    b, trace2 = train_full(net, theta, toy_task, sched)
    assert P.bitwise_equal(a, b)
    assert trace[1:] == trace2[1:]


def test_fast_adapt_contracts(toy_task):
    snet = cells.build_supernet(cells=2, channels=4, n_classes=2, heads={16: 1})
    W = cells.init_params(snet, 0)
    vcfg = VariationalConfig(beta=1e-3)
    obj = ElboObjective(snet, vcfg)
    cfg = MetaTrainConfig(batch_size=16, variational=vcfg)
    curves = fast_adapt_experiment(snet, W, toy_task, 0, cfg, obj, 1.0,
                                   scratch_params=cells.init_params(snet, 1))
    assert set(curves) == {"full", "frozen_arch", "scratch"}
    assert all(len(c) == 1 for c in curves.values())
    assert curves["full"] == curves["frozen_arch"]
    curves = fast_adapt_experiment(snet, W, toy_task, 1, cfg, obj, 1.0, arms=("full",))
    assert len(curves["full"]) == 2
    with pytest.raises(ConfigError):
        fast_adapt_experiment(snet, W, toy_task, 1, cfg, obj, 1.0, arms=("bogus",))
    with pytest.raises(ConfigError):
        fast_adapt_experiment(snet, W, toy_task, 1, cfg, obj, 1.0, arms=("scratch",))


def test_pca_two_points():
    X = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    r = pca_export(X, 1)
    np.testing.assert_allclose(np.abs(r.coords[:, 0]), [2.5, 2.5])
    np.testing.assert_allclose(r.variances, [12.5])
    np.testing.assert_allclose(r.ratios, [1.0])


def test_pca_against_hand_eigendecomposition():
    X = np.array([[2.0, 0.0], [0.0, 1.0], [-2.0, 0.0], [0.0, -1.0]])
    # covariance diag(8/3, 2/3): axes are the coordinate axes
    r = pca_export(X, 2)
    np.testing.assert_allclose(r.variances, [8 / 3, 2 / 3])
    np.testing.assert_allclose(np.abs(r.components), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(r.ratios, [0.8, 0.2])


def test_pca_reconstruction_and_gram_path():
    rng = stream(7, "pca")
    X = rng.normal(size=(6, 40)) * np.linspace(3, 0.1, 40)
    r = pca_export(X, 5)
    assert np.all(np.diff(r.variances) <= 0)
    np.testing.assert_allclose(r.coords @ r.components.T + r.mean, X, atol=1e-10)
    s = np.linalg.svd(X - X.mean(0), compute_uv=False)
    np.testing.assert_allclose(r.variances, s[:5] ** 2 / 5, rtol=1e-10)
    np.testing.assert_allclose(r.components.T @ r.components, np.eye(5), atol=1e-10)


def test_pca_rank_warning_and_errors():
    t = np.linspace(0, 1, 5)[:, None]
    X = np.hstack([t, 2 * t, -t])
    r = pca_export(X, 2)
    assert r.k == 1 and r.warnings
    with pytest.raises(ConfigError):
        pca_export(X[:2], 2)
    with pytest.raises(ConfigError):
        pca_export(np.zeros(4), 1)
