import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from conftest import dense, grad_check
from glgnn.graph_ops import hop_powers, knn_graph, normalize_adjacency, topk_rows
from glgnn.model import (
    ModelConfig, SubmoduleState, concat_labels, hop_weights, init_submodule, relation_graph,
    relation_topk, relation_topk_dense, select_features, submodule_forward,
)
from glgnn.numerics import ShapeError, Tensor, _record, mul, sum_all


def relation_oracle(Z, hop_list, v, self_loops=True):
    """Loop evaluation of softmax(Z Z^T) weighted per hop class."""
    n = len(Z)
    K = len(hop_list)
    out = np.zeros((n, n))
    for i in range(n):
        logits = [sum(Z[i][d] * Z[j][d] for d in range(len(Z[i]))) for j in range(n)]
        cols = [j for j in range(n) if self_loops or j != i]
        m = max(logits[j] for j in cols)
        tot = sum(np.exp(logits[j] - m) for j in cols)
        for j in cols:
            s = np.exp(logits[j] - m) / tot
            w = sum(hop_list[k][i][j] * v[k] for k in range(K))
            reach = any(hop_list[k][i][j] for k in range(K))
            if not reach and i != j:
                w = v[K]
            out[i][j] = s * w
    return out


def _instance(seed, n=8, d=3, K=2):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, d))
    A = knn_graph(rng.standard_normal((n, 2)), 2, "euclidean")
    v = rng.uniform(0.1, 1.0, (1, K + 1))
    return Z, A, v


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(3, 10), st.integers(1, 3), st.booleans())
def test_relation_graph_matches_loop_oracle(seed, n, K, self_loops):
    Z, A, v = _instance(seed, n=n, K=K)
    hp = hop_powers(A, K, dense=True)
    got = dense(relation_graph(Tensor(Z), hp, Tensor(v), self_loops=self_loops))
    ref = relation_oracle(Z.tolist(), [p.tolist() for p in hp.powers], v.ravel().tolist(), self_loops)
    np.testing.assert_allclose(got, ref, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 8), st.booleans())
def test_fused_relation_topk_equals_composition(seed, k, self_loops):
    Z, A, v = _instance(seed)
    ref = dense(topk_rows(relation_graph(Tensor(Z), hop_powers(A, 2, dense=True), Tensor(v),
                                         self_loops=self_loops), k))
    sp = relation_topk(Tensor(Z), hop_powers(sparse.csr_array(A), 2), Tensor(v), k, self_loops)
    dn = relation_topk_dense(Tensor(Z), hop_powers(A, 2, dense=True), Tensor(v), k, self_loops)
    assert sparse.issparse(sp.data)
    np.testing.assert_allclose(dense(sp), ref, atol=1e-14)
    np.testing.assert_allclose(dense(dn), ref, atol=1e-14)


def _weighted_sum(t, W):
    data = t.data
    if sparse.issparse(data):
        rows = np.repeat(np.arange(data.shape[0]), np.diff(data.indptr))
        w = W[rows, data.indices]
        return _record(np.array([[float(data.data @ w)]]), (t,), lambda g: (g[0, 0] * w,))
    return sum_all(mul(t, Tensor(W)))


@pytest.mark.parametrize("storage", ["sparse", "dense"])
@pytest.mark.parametrize("self_loops", [True, False])
def test_relation_topk_gradients(storage, self_loops):
    Z, A, v = _instance(11)
    W = np.random.default_rng(3).uniform(-1, 1, (8, 8))
    if storage == "sparse":
        hp, op = hop_powers(sparse.csr_array(A), 2), relation_topk
    else:
        hp, op = hop_powers(A, 2, dense=True), relation_topk_dense

    def build(t):
        return _weighted_sum(op(t["z"], hp, t["v"], 4, self_loops), W)

    err, n = grad_check(build, {"z": Z, "v": v})
    assert n == 27 and err < 1e-6


def test_hop_weights_mask():
    A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    M = hop_weights(hop_powers(A, 1, dense=True), Tensor([[0.7, 0.2]])).data
    np.testing.assert_allclose(M, [[0, 0.7, 0.2], [0.7, 0, 0.7], [0.2, 0.7, 0]])
    with pytest.raises(ShapeError):
        hop_weights(hop_powers(A, 1, dense=True), Tensor([[0.7, 0.2, 0.1]]))


def test_select_features_and_labels():
    x = Tensor(np.ones((3, 2)))
    np.testing.assert_array_equal(select_features(x, Tensor([[2.0, 0.0]])).data, [[2, 0]] * 3)
    with pytest.raises(ShapeError):
        select_features(x, Tensor([[1.0, 1.0, 1.0]]))
    z = concat_labels(x, np.eye(3)[:, :2], [1]).data
    np.testing.assert_array_equal(z[:, :2], [[0, 0], [0, 1], [0, 0]])


def test_config_validation_and_storage_rule():
    for bad in ({"k": 0}, {"dropout": 1.0}, {"agg_mode": "max"}, {"storage": "gpu"},
                {"hop_mode": "x"}, {"fusion_graph": "y"}):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    cfg = ModelConfig(k=15)
    assert cfg.dense_for(178) and not cfg.dense_for(1797)
    assert ModelConfig(k=110).dense_for(569)
    assert ModelConfig(storage="sparse").dense_for(10) is False


@pytest.mark.parametrize("n", [20, 400])
def test_submodule_forward_shapes_and_storage_agree(n):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((n, 5))
    Y = np.eye(3)[rng.integers(0, 3, n)]
    lb = np.zeros_like(Y)
    lb[:6] = Y[:6]
    outs = {}
    for storage in ("dense", "sparse"):
        cfg = ModelConfig(k=4, hidden=6, storage=storage)
        params = init_submodule(5, 3, cfg, np.random.default_rng(1))
        a0 = normalize_adjacency(Tensor(sparse.csr_array(knn_graph(X, 3)))).data
        st_ = SubmoduleState(a0.toarray() if storage == "dense" else a0)
        outs[storage] = submodule_forward(Tensor(X), lb, params, st_, cfg)
    for out in outs.values():
        assert out.X2.shape == (n, 3)
        np.testing.assert_allclose(out.X2.data.sum(axis=1), 1.0)
        assert ((dense(out.A) != 0).sum(axis=1) <= 4).all()
    np.testing.assert_allclose(outs["dense"].X2.data, outs["sparse"].X2.data, atol=1e-12)
    np.testing.assert_allclose(dense(outs["dense"].A1_norm), dense(outs["sparse"].A1_norm),
                               atol=1e-12)


def test_dropout_leaves_graphs_and_eval_output_unchanged():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((30, 4))
    Y = np.eye(2)[rng.integers(0, 2, 30)]
    cfg = ModelConfig(k=3, hidden=5, dropout=0.5)
    params = init_submodule(4, 2, cfg, np.random.default_rng(1))
    st_ = SubmoduleState(normalize_adjacency(Tensor(knn_graph(X, 3))).data)
    ev = submodule_forward(Tensor(X), Y * 0, params, st_, cfg)
    tr = submodule_forward(Tensor(X), Y * 0, params, st_, cfg, training=True,
                           rng=np.random.default_rng(2))
    np.testing.assert_array_equal(dense(ev.A), dense(tr.A))
    np.testing.assert_allclose(tr.eval_X2, ev.X2.data, atol=1e-14)
    assert not np.allclose(tr.X2.data, ev.X2.data)


def test_frozen_selection_and_hops():
    cfg = ModelConfig(freeze_selection=True, freeze_hops=True)
    params = init_submodule(4, 2, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(params.s.data, np.ones((1, 4)))
    assert set(params.named("m", cfg)) == {"m.W1", "m.W2"}
