"""Network of graphs over the sub-modules plus an aggregation node: attention,
mixing, fusion of predictions and graphs, and the training objective.

Node ``M`` (0-based) of the network is the aggregation node.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .graph_ops import knn_graph, normalize_adjacency, topk_rows
from .model import (
    ModelConfig, SubmoduleState, init_submodule, submodule_forward,
)
from .numerics import (
    ShapeError, Tensor, add, concat_rows, l1_diff, masked_cross_entropy, matmul, mul,
    reshape, row_softmax, scale, take_row, transpose,
)


@dataclass
class NetworkParams:
    a: Tensor
    b: Tensor
    x_agg: Tensor | None = None


@dataclass
class AggState:
    X_agg: np.ndarray
    alpha: np.ndarray | None = None
    Nmat: np.ndarray | None = None
    Y_t: np.ndarray | None = None
    A_t: np.ndarray | None = None


def initial_agg_state(n, c):
    return AggState(X_agg=np.full((n, c), 1.0 / c))


def _stack(outputs, x_agg):
    n, c = x_agg.shape
    for o in outputs:
        if o.shape != (n, c):
            raise ShapeError(f"sub-module output {o.shape} vs aggregation node {x_agg.shape}")
    return concat_rows([reshape(o, 1, n * c) for o in outputs] + [reshape(x_agg, 1, n * c)])


def attention_matrix(outputs, x_agg, a):
    """``alpha[p, q] = a . (flat(O_p) * flat(O_q))`` with the aggregation node last."""
    x_agg = x_agg if isinstance(x_agg, Tensor) else Tensor(x_agg)
    o = _stack(outputs, x_agg)
    if a.shape != (1, o.cols):
        raise ShapeError(f"attention vector {a.shape} vs flattened outputs of length {o.cols}")
    raw = matmul(mul(o, a), transpose(o))
    # BLAS need not return a bit-symmetric product; averaging with the transpose does
    return scale(add(raw, transpose(raw)), 0.5)


def network_adjacency(alpha, b):
    if alpha.shape != b.shape or alpha.rows != alpha.cols:
        raise ShapeError(f"network adjacency: {alpha.shape} x {b.shape}")
    return matmul(alpha, b)


def fuse_predictions(outputs, x_agg, nmat):
    """Row softmax of ``sum_m N[agg, m] O_m + N[agg, agg] X_agg``."""
    x_agg = x_agg if isinstance(x_agg, Tensor) else Tensor(x_agg)
    n, c = x_agg.shape
    o = _stack(outputs, x_agg)
    weights = take_row(nmat, len(outputs))
    return row_softmax(reshape(matmul(weights, o), n, c))


def fuse_graphs(graphs, nmat):
    """Dense row softmax of ``sum_m N[agg, m] A_m`` (not differentiated)."""
    N = nmat.data if isinstance(nmat, Tensor) else np.asarray(nmat)
    M = len(graphs)
    total = None
    for m, g in enumerate(graphs):
        g = g.data if isinstance(g, Tensor) else g
        term = g.toarray() if sparse.issparse(g) else np.asarray(g, dtype=np.float64)
        term = term * N[M, m]
        total = term if total is None else total + term
    total = total - total.max(axis=1, keepdims=True)
    np.exp(total, out=total)
    total /= total.sum(axis=1, keepdims=True)
    return total


def fused_topk_graph(graphs, nmat, k):
    """Fused graph restricted to the union of sub-module supports, top-k per row.

    Entries outside every sub-module graph all share one softmax value per
    row, so they carry no learned relation and are excluded before selection.
    """
    fused = fuse_graphs(graphs, nmat)
    support = np.zeros(fused.shape, dtype=bool)
    for g in graphs:
        g = g.data if isinstance(g, Tensor) else g
        if sparse.issparse(g):
            coo = sparse.coo_array(g)
            support[coo.row[coo.data != 0], coo.col[coo.data != 0]] = True
        else:
            support |= np.asarray(g) != 0
    fused = np.where(support, fused, 0.0)
    return sparse.csr_array(topk_rows(Tensor(fused), k).data)


@dataclass
class LossParts:
    l1: float
    l2: float
    reg: float
    total: float


def total_loss(outputs, y_t, Y, train, mu_l1=1.0, mu_l2=1.0, params=None, weight_decay=0.0):
    """Graph-consistency term plus supervised cross entropy.

    Weight decay is applied by the optimizer; its penalty-equivalent
    ``wd/2 * sum(theta^2)`` is only reported.
    """
    train = np.asarray(train)
    if train.size == 0:
        raise ValueError("total_loss: empty training mask")
    l1 = None
    for out in outputs:
        term = l1_diff(out.A_norm, out.A1_norm)
        l1 = term if l1 is None else add(l1, term)
    l2 = masked_cross_entropy(y_t, Y, train)
    loss = add(scale(l1, mu_l1), scale(l2, mu_l2))
    reg = 0.0
    if params:
        reg = 0.5 * weight_decay * sum(float((p.data ** 2).sum()) for p in params.values())
    return loss, LossParts(l1.item(), l2.item(), reg, loss.item() + reg)


def update_agg_state(state, y_t):
    """Carry a detached copy of this iteration's fused prediction."""
    Y = y_t.data if isinstance(y_t, Tensor) else y_t
    return AggState(X_agg=np.array(Y, copy=True), alpha=state.alpha, Nmat=state.Nmat,
                    Y_t=np.array(Y, copy=True), A_t=state.A_t)


# ---------------------------------------------------------------------------
# the full model


def _carried(a):
    return sparse.csr_array(a, copy=True) if sparse.issparse(a) else np.array(a, copy=True)


@dataclass
class ForwardPass:
    outputs: list
    alpha: Tensor
    nmat: Tensor
    y_t: Tensor
    eval_y_t: np.ndarray
    eval_nmat: np.ndarray


@dataclass
class GLGNN:
    """M sub-modules, the network of graphs, and all carried state."""

    cfg: ModelConfig
    X: np.ndarray
    label_block: np.ndarray
    submodules: list
    states: list
    net: NetworkParams
    agg: AggState
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, ds, cfg, rng, initial_graph=None):
        """Initialise parameters and states for dataset ``ds``.

        ``initial_graph`` (N x N, nonnegative) seeds every sub-module's carried
        graph; by default the dataset graph when present, else a kNN graph.
        """
        N, F, C = ds.N, ds.F, ds.C
        if cfg.k > N:
            raise ValueError(f"k={cfg.k} exceeds the node count {N}")
        subs = [init_submodule(F, C, cfg, rng) for _ in range(cfg.modules)]
        bound = 1.0 / np.sqrt(N * C)
        net = NetworkParams(a=Tensor(rng.uniform(-bound, bound, size=(1, N * C))),
                            b=Tensor(np.eye(cfg.modules + 1)))
        if cfg.agg_mode == "learned":
            net.x_agg = Tensor(np.full((N, C), 1.0 / C))
        if initial_graph is None:
            if ds.graph is not None:
                initial_graph = ds.graph.to_csr(symmetric=True)
            else:
                initial_graph = knn_graph(ds.X, min(cfg.knn_init, N - 1), cfg.knn_metric)
        a0 = normalize_adjacency(Tensor(sparse.csr_array(initial_graph))).data
        if cfg.dense_for(N):
            a0 = a0.toarray()
        states = [SubmoduleState(a0) for _ in range(cfg.modules)]
        return cls(cfg, ds.X, ds.label_block(), subs, states, net, initial_agg_state(N, C))

    def trainable(self):
        params = {}
        for m, sub in enumerate(self.submodules):
            params.update(sub.named(f"sub{m}", self.cfg))
        params["net.a"] = self.net.a
        params["net.b"] = self.net.b
        if self.net.x_agg is not None:
            params["net.x_agg"] = self.net.x_agg
        return params

    def _agg_tensor(self, x2s):
        mode = self.cfg.agg_mode
        if mode == "previous":
            return Tensor(self.agg.X_agg)
        if mode == "mean":
            total = x2s[0]
            for x in x2s[1:]:
                total = add(total, x)
            return scale(total, 1.0 / len(x2s))
        if mode == "learned":
            return self.net.x_agg
        raise ValueError(f"unsupported agg_mode {mode!r}")

    def forward(self, training=False, rng=None):
        x = Tensor(self.X)
        outputs = [
            submodule_forward(x, self.label_block, sub, st, self.cfg, training, rng)
            for sub, st in zip(self.submodules, self.states)
        ]
        x2s = [o.X2 for o in outputs]
        x_agg = self._agg_tensor(x2s)
        alpha = attention_matrix(x2s, x_agg, self.net.a)
        nmat = network_adjacency(alpha, self.net.b)
        y_t = fuse_predictions(x2s, x_agg, nmat)
        if training and self.cfg.dropout > 0:
            const_a, const_b = Tensor(self.net.a.data), Tensor(self.net.b.data)
            ev = [Tensor(o.eval_X2) for o in outputs]
            ev_agg = Tensor(self._agg_tensor(ev).data)
            ev_n = network_adjacency(attention_matrix(ev, ev_agg, const_a), const_b)
            eval_y, eval_n = fuse_predictions(ev, ev_agg, ev_n).data, ev_n.data
        else:
            eval_y, eval_n = y_t.data, nmat.data
        return ForwardPass(outputs, alpha, nmat, y_t, eval_y, eval_n)

    def commit(self, fp):
        """Advance carried state: second-layer graphs and the fused prediction."""
        self.states = [SubmoduleState(_carried(o.A1_norm.data)) for o in fp.outputs]
        agg = update_agg_state(self.agg, fp.y_t)
        agg.alpha, agg.Nmat = fp.alpha.data.copy(), fp.nmat.data.copy()
        self.agg = agg

    def snapshot(self):
        return {
            "params": {k: v.data.copy() for k, v in self.all_params().items()},
            "states": list(self.states),
            "agg": self.agg,
        }

    def restore(self, snap):
        for name, t in self.all_params().items():
            t.data = snap["params"][name].copy()
        self.states = list(snap["states"])
        self.agg = snap["agg"]

    def all_params(self):
        params = {}
        for m, sub in enumerate(self.submodules):
            params.update({f"sub{m}.s": sub.s, f"sub{m}.W1": sub.W1,
                           f"sub{m}.W2": sub.W2, f"sub{m}.V_raw": sub.V_raw})
        params["net.a"] = self.net.a
        params["net.b"] = self.net.b
        if self.net.x_agg is not None:
            params["net.x_agg"] = self.net.x_agg
        return params

    def selection_weights(self):
        """Mean ``|s_m|`` across sub-modules, one value per feature."""
        return np.mean([np.abs(sub.s.data.ravel()) for sub in self.submodules], axis=0)

    def fused_graph(self, fp, k=None):
        k = self.cfg.k if k is None else k
        graphs = [o.graph_for_fusion for o in fp.outputs]
        return fused_topk_graph(graphs, fp.eval_nmat, k)
