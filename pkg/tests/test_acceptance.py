"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import grad_check, record_criterion
from glgnn.data import SyntheticSpec, make_splits, standardize, synth
from glgnn.graph_ops import hop_powers, knn_graph, normalize_adjacency
from glgnn.model import ModelConfig, relation_graph
from glgnn.network import GLGNN, attention_matrix, fuse_predictions, total_loss
from glgnn.numerics import Tape, Tensor, backward
from glgnn.runner import load_config, run_baseline, run_denoise, run_feature_report, run_train
from test_graph_ops import normalize_oracle
from test_model import relation_oracle
from test_network import _Out, attention_oracle, fuse_oracle, loss_oracle
from test_numerics import OP_CASES, op_inputs


def _mean(xs):
    return float(np.mean(xs))


def test_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    op_err = max(grad_check(build, op_inputs(name, shapes, rng))[0]
                 for name, build, shapes in OP_CASES)

    ds, _ = synth(SyntheticSpec(per_class=3, informative=3, noise=1, seed=1))
    ds = standardize(make_splits(ds, 2, 2, seed=0))
    cfg = ModelConfig(modules=2, hops=2, k=3, hidden=4, dropout=0.0, agg_mode="mean")
    model = GLGNN.build(ds, cfg, np.random.default_rng(0))
    params = model.trainable()
    # equal hop weights at initialisation tie the top-k; evaluate away from the tie
    for sub in model.submodules:
        sub.V_raw.data[:] = rng.uniform(-1, 1, sub.V_raw.data.shape)

    def loss():
        fp = model.forward()
        return total_loss(fp.outputs, fp.y_t, ds.Y, ds.train)[0]

    with Tape() as tape:
        tape.watch_all(params)
        total = loss()
    grads = backward(tape, total)
    picks = [(name, flat) for name, p in sorted(params.items())
             for flat in rng.choice(p.data.size, min(3, p.data.size), replace=False)]
    worst, h = 0.0, 1e-5
    for name, flat in picks:
        p = params[name]
        ix = np.unravel_index(flat, p.data.shape)
        old = p.data[ix]
        p.data[ix] = old + h
        up = loss().item()
        p.data[ix] = old - h
        down = loss().item()
        p.data[ix] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - grads[name][ix]) / max(abs(fd), abs(grads[name][ix]), 1e-8))
    elapsed = time.perf_counter() - t0
    ok = ds.N == 6 and len(picks) >= 20 and worst < 1e-4 and op_err < 1e-4 and elapsed < 10
    detail = (f"{len(OP_CASES)} ops max rel err {op_err:.1e}; full loss {len(picks)} coords "
              f"max rel err {worst:.1e}; {elapsed:.1f}s (limit 10s)")
    assert record_criterion(1, "finite-difference gradients", ok, detail)


def test_2_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}

    def note(key, a, b):
        worst[key] = max(worst.get(key, 0.0), float(np.max(np.abs(np.asarray(a) - np.asarray(b)))))

    for trial in range(20):
        n = int(rng.integers(3, 11))
        M = int(rng.integers(1, 4))
        K = int(rng.integers(1, 4))
        Z = rng.standard_normal((n, 3))
        A = knn_graph(rng.standard_normal((n, 2)), 2)
        v = rng.uniform(0.1, 1.0, (1, K + 1))
        hp = hop_powers(A, K, dense=True)
        for self_loops in (True, False):
            got = relation_graph(Tensor(Z), hp, Tensor(v), self_loops=self_loops).data
            note("relation_graph", got, relation_oracle(Z.tolist(), [p.tolist() for p in hp.powers],
                                                        v.ravel().tolist(), self_loops))
        W = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
        note("normalize_adjacency", normalize_adjacency(Tensor(W)).data, normalize_oracle(W))
        outs = [rng.dirichlet(np.ones(3), size=n) for _ in range(M)]
        agg = rng.dirichlet(np.ones(3), size=n)
        a = rng.uniform(-1, 1, (1, n * 3))
        note("attention_matrix", attention_matrix([Tensor(o) for o in outs], Tensor(agg), Tensor(a)).data,
             attention_oracle(outs, agg, a))
        N = rng.uniform(-3, 3, (M + 1, M + 1))
        note("fuse_predictions", fuse_predictions([Tensor(o) for o in outs], Tensor(agg), Tensor(N)).data,
             fuse_oracle(outs, agg, N))
        As = [rng.random((n, n)) for _ in range(M)]
        Bs = [rng.random((n, n)) for _ in range(M)]
        Y = np.eye(3)[rng.integers(0, 3, n)]
        train = sorted(rng.choice(n, 2, replace=False).tolist())
        mu1, mu2 = rng.uniform(0, 2, 2)
        got = total_loss([_Out(Tensor(x), Tensor(y)) for x, y in zip(As, Bs)], Tensor(agg), Y, train,
                         mu1, mu2)[0].item()
        note("total_loss", got, loss_oracle(As, Bs, agg, Y, train, mu1, mu2))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-10 and elapsed < 5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s (limit 5s)"
    assert record_criterion(2, "loop-oracle equivalence", ok, detail)


def _protocol(name, seeds, budget):
    """Mean GL-GNN test accuracy over seeds; stops launching seeds past the budget."""
    cfg = load_config(name)
    t0 = time.perf_counter()
    accs = []
    for seed in range(seeds):
        accs.append(run_train(cfg, seed=seed).test_accuracy)
        if time.perf_counter() - t0 > budget:
            break
    return cfg, accs, t0


@pytest.mark.slow
def test_3_wine():
    cfg, accs, t0 = _protocol("wine", 10, 180)
    base = [run_baseline(cfg, seed=s).test_accuracy for s in range(len(accs))]
    elapsed = time.perf_counter() - t0
    m, b = 100 * _mean(accs), 100 * _mean(base)
    ok = len(accs) == 10 and m >= 92.0 and m >= b - 1.0 and elapsed < 180
    detail = (f"GL-GNN {m:.2f} over {len(accs)} seeds, kNN-GCN {b:.2f} (need >= 92.0 and "
              f">= kNN-GCN - 1); {elapsed:.0f}s (limit 180s)")
    assert record_criterion(3, "Wine accuracy", ok, detail)


@pytest.mark.slow
def test_4_cancer():
    _, accs, t0 = _protocol("cancer", 10, 300)
    elapsed = time.perf_counter() - t0
    m = 100 * _mean(accs)
    ok = len(accs) == 10 and m >= 90.0 and elapsed < 300
    detail = f"GL-GNN {m:.2f} over {len(accs)}/10 seeds (need >= 90.0); {elapsed:.0f}s (limit 300s)"
    assert record_criterion(4, "Cancer accuracy", ok, detail)


@pytest.mark.slow
def test_5_digits():
    _, accs, t0 = _protocol("digits", 5, 900)
    elapsed = time.perf_counter() - t0
    m = 100 * _mean(accs)
    ok = len(accs) == 5 and m >= 85.0 and elapsed < 900
    detail = f"GL-GNN {m:.2f} over {len(accs)}/5 seeds (need >= 85.0); {elapsed:.0f}s (limit 900s)"
    assert record_criterion(5, "Digits accuracy", ok, detail)


def test_6_denoise():
    cfg = load_config("synthetic_denoise")
    t0 = time.perf_counter()
    reps = [run_denoise(cfg, seed=s, noise_edges=200) for s in range(3)]
    elapsed = time.perf_counter() - t0
    absent = [1 - r.noise_remaining / r.noise_added for r in reps]
    drop = 100 * (_mean([r.clean_test_accuracy for r in reps]) - _mean([r.test_accuracy for r in reps]))
    ok = (cfg.synthetic["per_class"] * cfg.synthetic["classes"] == 100 and min(absent) >= 0.8
          and drop <= 3.0 and elapsed < 120)
    detail = (f"noise absent per seed {', '.join(f'{a:.1%}' for a in absent)} (need >= 80%); "
              f"accuracy drop {drop:.2f} points (need <= 3); {elapsed:.0f}s (limit 120s)")
    assert record_criterion(6, "denoising", ok, detail)


def test_7_features():
    cfg = load_config("synthetic_features")
    t0 = time.perf_counter()
    reps = [run_feature_report(cfg, seed=s, fraction=0.5) for s in range(3)]
    elapsed = time.perf_counter() - t0
    ordered = []
    for r in reps:
        w = {row["name"]: row["weight"] for row in r.feature_weights}
        inf = _mean([w[f"inf{j}"] for j in range(10)])
        noise = _mean([w[f"noise{j}"] for j in range(10)])
        ordered.append(noise < inf)
    base = _mean([r.baseline_accuracy for r in reps])
    low = 100 * abs(_mean([r.deleted_low_accuracy for r in reps]) - base)
    high = 100 * (base - _mean([r.deleted_high_accuracy for r in reps]))
    ok = (all(ordered) and all(r.deleted_count == 10 for r in reps) and low <= 2.0
          and high >= 10.0 and elapsed < 120)
    detail = (f"noise |s| below informative in {sum(ordered)}/3 seeds; bottom-10 deletion "
              f"changes accuracy {low:.2f} points (need <= 2); top-10 deletion drops it "
              f"{high:.2f} points (need >= 10); {elapsed:.0f}s (limit 120s)")
    assert record_criterion(7, "feature selection", ok, detail)


def test_8_reduction():
    base = load_config("wine")
    # one sub-module, frozen hop weights and selection, 1-hop mask over the kNN start graph
    cfg = replace(base, modules=1, hops=1, freeze_selection=True, freeze_hops=True,
                  k=base.knn_init)
    t0 = time.perf_counter()
    red = run_train(cfg, seed=0).test_accuracy
    gcn = run_baseline(base, seed=0).test_accuracy
    elapsed = time.perf_counter() - t0
    gap = 100 * abs(red - gcn)
    ok = gap <= 0.5 and elapsed < 60
    detail = (f"reduced GL-GNN {100 * red:.2f} vs kNN-GCN {100 * gcn:.2f}, gap {gap:.2f} points "
              f"(need <= 0.5); {elapsed:.0f}s (limit 60s)")
    assert record_criterion(8, "reduction to kNN-GCN", ok, detail)


def test_9_determinism():
    cfg = load_config("wine")
    t0 = time.perf_counter()
    a = run_train(cfg, seed=3).to_json()
    b = run_train(cfg, seed=3).to_json()
    elapsed = time.perf_counter() - t0
    ok = a == b and elapsed < 60
    detail = f"{len(a)}-byte reports {'identical' if a == b else 'differ'}; {elapsed:.0f}s (limit 60s)"
    assert record_criterion(9, "determinism", ok, detail)
