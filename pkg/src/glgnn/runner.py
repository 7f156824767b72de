"""Training loop, evaluation, experiment harnesses, baselines and sweeps."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse

from . import data as data_mod
from .data import DataError, Dataset, SyntheticSpec, make_splits, scale_rows, standardize, synth
from .graph_ops import (
    EdgeList, inject_noise_edges, knn_graph, normalize_adjacency, remaining_noise,
)
from .model import ModelConfig
from .network import GLGNN, total_loss
from .numerics import (
    OptimizerState, Tape, Tensor, adam_step, backward, dropout, masked_cross_entropy,
    matmul, relu, row_softmax,
)

CONFIG_DIR = Path(__file__).parent / "configs"

MODES = ("train", "denoise", "features", "baseline", "sweep")
BASELINES = ("knn_gcn", "logreg")
SWEEPABLE = {"k": "k", "M": "modules", "modules": "modules", "K": "hops", "hops": "hops"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "wine"
    synthetic: dict | None = None
    n_train: int | None = None
    n_val: int | None = None
    standardize: bool = True
    row_norm: float | None = None
    epochs: int = 200
    lr: float = 0.01
    mu_l1: float = 1.0
    mu_l2: float = 1.0
    weight_decay: float = 5e-4
    seed: int = 0
    seeds: int = 1
    # model
    modules: int = 3
    hops: int = 2
    k: int = 10
    hidden: int = 32
    dropout: float = 0.5
    hop_mode: str = "support"
    fusion_graph: str = "sparse"
    agg_mode: str = "previous"
    freeze_selection: bool = False
    freeze_hops: bool = False
    knn_init: int = 10
    knn_metric: str = "cosine"
    storage: str = "auto"
    self_loops: bool = False
    # experiments
    noise_edges: int = 0
    delete_fraction: float = 0.5
    baseline: str = "knn_gcn"
    baseline_k: int | None = None
    export_nmat: bool = False
    out: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.mu_l1 < 0 or self.mu_l2 < 0:
            raise ConfigError("lr must be > 0; weight_decay, mu_l1, mu_l2 must be >= 0")
        if not 0.0 <= self.delete_fraction < 1.0:
            raise ConfigError("delete_fraction must lie in [0, 1)")
        if self.row_norm is not None and self.row_norm <= 0:
            raise ConfigError("row_norm must be positive when set")
        if self.noise_edges < 0:
            raise ConfigError("noise_edges must be >= 0")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self):
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{n: getattr(self, n) for n in names})

    def to_dict(self):
        return asdict(self)


def config_from_dict(raw, **overrides):
    known = {f.name for f in fields(RunConfig)}
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, **overrides):
    """Read a config JSON; a bare name such as ``wine`` resolves to a shipped config."""
    p = Path(path)
    if not p.exists() and not p.suffix and (CONFIG_DIR / f"{path}.json").exists():
        p = CONFIG_DIR / f"{path}.json"
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    if isinstance(raw.get("dataset"), str) and raw["dataset"].endswith(".json"):
        # relative manifests: next to the config first, else the working directory
        ds_path = Path(raw["dataset"])
        if not ds_path.is_absolute() and (p.parent / ds_path).exists():
            raw["dataset"] = str((p.parent / ds_path).resolve())
    return config_from_dict(raw, **overrides)


# ---------------------------------------------------------------------------
# datasets


@lru_cache(maxsize=8)
def _builtin(name):
    return data_mod.builtin(name)


def base_dataset(cfg):
    """Dataset without splits, plus the synthetic ground truth when applicable."""
    if cfg.dataset == "synthetic":
        spec = SyntheticSpec(**(cfg.synthetic or {}))
        return synth(spec)
    if cfg.dataset in data_mod.BUILTIN:
        return _builtin(cfg.dataset), None
    path = Path(cfg.dataset)
    if path.suffix == ".json":
        ds, split = data_mod.load_manifest(path)
        return (ds, split), None
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {cfg.dataset}")
    raise DataError(f"dataset {cfg.dataset!r} is neither a built-in name nor a manifest JSON")


def prepare(cfg, seed):
    """Split (seeded), standardize and optionally rescale rows; returns ``(dataset, ground_truth)``."""
    ds, truth = base_dataset(cfg)
    split = {}
    if isinstance(ds, tuple):
        ds, split = ds
    n_train = cfg.n_train if cfg.n_train is not None else split.get("train")
    n_val = cfg.n_val if cfg.n_val is not None else split.get("val")
    if n_train is None or n_val is None:
        published = data_mod.PUBLISHED_SPLITS.get(ds.name)
        if published is None:
            raise ConfigError(f"no split sizes given for dataset {ds.name!r}")
        n_train = published[0] if n_train is None else n_train
        n_val = published[1] if n_val is None else n_val
    ds = make_splits(ds, n_train, n_val, seed)
    if cfg.standardize:
        ds = standardize(ds)
    if cfg.row_norm is not None:
        ds = scale_rows(ds, cfg.row_norm)
    if cfg.k > ds.N:
        raise ConfigError(f"k={cfg.k} exceeds the node count {ds.N}")
    return ds, truth


# ---------------------------------------------------------------------------
# reports

REPORT_KEYS = (
    "mode", "dataset", "seed", "config", "history", "best_epoch",
    "train_accuracy", "val_accuracy", "test_accuracy",
    "clean_test_accuracy", "noise_remaining", "noise_added",
    "feature_weights", "baseline_accuracy", "deleted_low_accuracy", "deleted_high_accuracy",
    "deleted_count", "monte_carlo", "sweep",
)


@dataclass
class RunReport:
    mode: str
    dataset: str
    seed: int
    config: dict
    history: dict = field(default_factory=lambda: {"l1": [], "l2": [], "total": [], "val_accuracy": []})
    best_epoch: int | None = None
    train_accuracy: float | None = None
    val_accuracy: float | None = None
    test_accuracy: float | None = None
    clean_test_accuracy: float | None = None
    noise_remaining: int | None = None
    noise_added: int | None = None
    feature_weights: list | None = None
    baseline_accuracy: float | None = None
    deleted_low_accuracy: float | None = None
    deleted_high_accuracy: float | None = None
    deleted_count: int | None = None
    monte_carlo: dict | None = None
    sweep: list | None = None
    # not serialized: wall time goes to a separate file so reports stay byte-stable
    wall_time: float = field(default=0.0, compare=False)
    extras: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self):
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# evaluation


def accuracy(probs, labels, mask):
    """Fraction of ``mask`` rows whose argmax (lowest index on ties) matches ``labels``."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("accuracy: empty mask")
    P = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return float(np.mean(P[mask].argmax(axis=1) == np.asarray(labels)[mask]))


def evaluate(model, ds, mask):
    """Accuracy of the fused prediction of ``model`` (evaluation mode) on ``mask``."""
    fp = model.forward(training=False)
    return accuracy(fp.y_t, ds.labels, mask)


def _rngs(seed):
    return np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2])


# ---------------------------------------------------------------------------
# GL-GNN training


def train(cfg, ds=None, seed=None, initial_graph=None, history_nmat=False):
    """Run ``cfg.epochs`` iterations and restore the best-validation parameters.

    Validation accuracy of the parameters entering each step is measured on
    the dropout-free prediction computed in the same forward pass; ties keep
    the lower training loss, then the earlier epoch.
    """
    seed = cfg.seed if seed is None else seed
    if ds is None:
        ds, _ = prepare(cfg, seed)
    t0 = time.perf_counter()
    init_rng, drop_rng = _rngs(seed)
    model = GLGNN.build(ds, cfg.model_config(), init_rng, initial_graph=initial_graph)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.trainable()
    labels = ds.labels
    has_val = len(ds.val) > 0
    report = RunReport(mode="train", dataset=ds.name, seed=seed, config=cfg.to_dict())
    hist = report.history
    nmats = []
    best_key, best_snap, best_epoch = None, None, None

    def consider(epoch, probs, loss_value):
        nonlocal best_key, best_snap, best_epoch
        acc = accuracy(probs, labels, ds.val) if has_val else 0.0
        key = (acc, -loss_value)
        if best_key is None or key > best_key:
            best_key, best_snap, best_epoch = key, model.snapshot(), epoch
        return acc

    for epoch in range(cfg.epochs):
        with Tape() as tape:
            tape.watch_all(params)
            fp = model.forward(training=True, rng=drop_rng)
            loss, parts = total_loss(fp.outputs, fp.y_t, ds.Y, ds.train, cfg.mu_l1, cfg.mu_l2,
                                     params, cfg.weight_decay)
        grads = backward(tape, loss)
        val_acc = consider(epoch, fp.eval_y_t, parts.total)
        hist["l1"].append(parts.l1)
        hist["l2"].append(parts.l2)
        hist["total"].append(parts.total)
        hist["val_accuracy"].append(val_acc)
        if history_nmat:
            nmats.append(fp.eval_nmat.tolist())
        adam_step(params, grads, opt)
        model.commit(fp)

    # parameters after the last step have not been scored yet
    fp = model.forward(training=False)
    loss, parts = total_loss(fp.outputs, fp.y_t, ds.Y, ds.train, cfg.mu_l1, cfg.mu_l2,
                             params, cfg.weight_decay)
    consider(cfg.epochs, fp.y_t.data, parts.total)
    model.restore(best_snap)
    fp = model.forward(training=False)
    probs = fp.y_t.data
    report.best_epoch = best_epoch
    report.train_accuracy = accuracy(probs, labels, ds.train)
    report.val_accuracy = accuracy(probs, labels, ds.val) if has_val else None
    report.test_accuracy = accuracy(probs, labels, ds.test) if len(ds.test) else None
    report.feature_weights = [
        {"name": n, "weight": float(w)} for n, w in zip(ds.names, model.selection_weights())
    ]
    report.wall_time = time.perf_counter() - t0
    report.extras = {"forward": fp, "nmat_history": nmats if history_nmat else None}
    return model, report


def fused_graph_edges(model, fp, k=None):
    """Fused top-k graph as an :class:`EdgeList` (self-loops dropped)."""
    return EdgeList.from_matrix(model.fused_graph(fp, k))


# ---------------------------------------------------------------------------
# baselines


def _fit(forward, params, ds, cfg, seed, mode):
    """Shared loop for the baselines: same optimizer, epochs and checkpoint rule."""
    _, drop_rng = _rngs(seed)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    labels = ds.labels
    report = RunReport(mode=mode, dataset=ds.name, seed=seed, config=cfg.to_dict())
    hist = report.history
    best_key, best, best_epoch = None, None, None
    has_val = len(ds.val) > 0

    def consider(epoch, probs, loss_value):
        nonlocal best_key, best, best_epoch
        acc = accuracy(probs, labels, ds.val) if has_val else 0.0
        key = (acc, -loss_value)
        if best_key is None or key > best_key:
            best_key, best_epoch = key, epoch
            best = {k: v.data.copy() for k, v in params.items()}
        return acc

    for epoch in range(cfg.epochs):
        with Tape() as tape:
            tape.watch_all(params)
            p_train, p_eval = forward(True, drop_rng)
            loss = masked_cross_entropy(p_train, ds.Y, ds.train)
        grads = backward(tape, loss)
        reg = 0.5 * cfg.weight_decay * sum(float((p.data ** 2).sum()) for p in params.values())
        total = loss.item() + reg
        hist["l1"].append(0.0)
        hist["l2"].append(loss.item())
        hist["total"].append(total)
        hist["val_accuracy"].append(consider(epoch, p_eval, total))
        adam_step(params, grads, opt)
    p_final, _ = forward(False, None)
    loss = masked_cross_entropy(p_final, ds.Y, ds.train).item()
    reg = 0.5 * cfg.weight_decay * sum(float((p.data ** 2).sum()) for p in params.values())
    consider(cfg.epochs, p_final.data, loss + reg)
    for k, v in params.items():
        v.data = best[k]
    probs, _ = forward(False, None)
    report.best_epoch = best_epoch
    report.train_accuracy = accuracy(probs, labels, ds.train)
    report.val_accuracy = accuracy(probs, labels, ds.val) if has_val else None
    report.test_accuracy = accuracy(probs, labels, ds.test) if len(ds.test) else None
    report.baseline_accuracy = report.test_accuracy
    return params, report


def knn_gcn(cfg, ds, seed):
    """Fixed kNN graph and a two-layer GCN with the sub-module's layer layout."""
    from .model import glorot

    init_rng, _ = _rngs(seed)
    k = cfg.baseline_k or cfg.knn_init
    a_norm = Tensor(normalize_adjacency(Tensor(knn_graph(ds.X, min(k, ds.N - 1), cfg.knn_metric))).data)
    x = Tensor(ds.X)
    params = {"W1": Tensor(glorot(init_rng, ds.F, cfg.hidden)),
              "W2": Tensor(glorot(init_rng, cfg.hidden, ds.C))}

    def forward(training, rng):
        x1 = relu(matmul(a_norm, matmul(x, params["W1"])))
        h = dropout(x1, cfg.dropout, rng) if training else x1
        out = row_softmax(matmul(a_norm, matmul(h, params["W2"])))
        if h is x1:
            return out, out.data
        logits = a_norm.data @ (x1.data @ params["W2"].data)
        return out, _softmax_np(logits)

    t0 = time.perf_counter()
    _, report = _fit(forward, params, ds, cfg, seed, "baseline")
    report.wall_time = time.perf_counter() - t0
    return report


def logreg(cfg, ds, seed):
    """Multinomial logistic regression on the same splits and optimizer."""
    from .numerics import add

    x = Tensor(ds.X)
    params = {"W": Tensor(np.zeros((ds.F, ds.C))), "b": Tensor(np.zeros((1, ds.C)))}

    def forward(training, rng):
        out = row_softmax(add(matmul(x, params["W"]), params["b"]))
        return out, out.data

    t0 = time.perf_counter()
    _, report = _fit(forward, params, ds, cfg, seed, "baseline")
    report.wall_time = time.perf_counter() - t0
    return report


def _softmax_np(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def run_baseline(cfg, which=None, ds=None, seed=None):
    which = which or cfg.baseline
    seed = cfg.seed if seed is None else seed
    if ds is None:
        ds, _ = prepare(cfg, seed)
    if which == "knn_gcn":
        return knn_gcn(cfg, ds, seed)
    if which == "logreg":
        return logreg(cfg, ds, seed)
    raise ConfigError(f"unknown baseline {which!r}; choose from {BASELINES}")


# ---------------------------------------------------------------------------
# experiments


def run_train(cfg, seed=None):
    model, report = train(cfg, seed=seed, history_nmat=cfg.export_nmat)
    report.extras["fused_graph"] = model.fused_graph(report.extras["forward"])
    return report


def run_denoise(cfg, seed=None, noise_edges=None):
    """Train on the clean graph and on the graph with planted noise edges.

    The fused top-k graph of the noisy run is scored against the planted set.
    A dataset without a graph starts from the noise edges alone.
    """
    seed = cfg.seed if seed is None else seed
    n_noise = cfg.noise_edges if noise_edges is None else noise_edges
    t0 = time.perf_counter()
    ds, _ = prepare(cfg, seed)
    clean = ds.graph if ds.graph is not None else EdgeList([], [], [], ds.N)
    clean_csr = clean.to_csr(symmetric=True)
    _, clean_rep = train(cfg, ds=ds, seed=seed, initial_graph=clean_csr)
    noisy, record = inject_noise_edges(clean, n_noise, seed)
    model, report = train(cfg, ds=ds, seed=seed, initial_graph=noisy.to_csr(symmetric=True))
    learned = model.fused_graph(report.extras["forward"])
    remaining, added = remaining_noise(learned, record)
    report.mode = "denoise"
    report.clean_test_accuracy = clean_rep.test_accuracy
    report.noise_remaining, report.noise_added = remaining, added
    report.extras["fused_graph"] = learned
    report.wall_time = time.perf_counter() - t0
    return report


def delete_count(F, fraction):
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("delete fraction must lie in [0, 1)")
    return int(round(fraction * F))


def run_feature_report(cfg, seed=None, fraction=None):
    """Rank features by mean |s| and retrain kNN-GCN without the lowest / highest ones."""
    seed = cfg.seed if seed is None else seed
    fraction = cfg.delete_fraction if fraction is None else fraction
    t0 = time.perf_counter()
    ds, _ = prepare(cfg, seed)
    model, report = train(cfg, ds=ds, seed=seed)
    weights = model.selection_weights()
    d = delete_count(ds.F, fraction)
    order = np.argsort(weights, kind="stable")
    base = knn_gcn(cfg, ds, seed).test_accuracy
    if d == 0:
        low = high = base
    else:
        keep_low = np.sort(order[d:])
        keep_high = np.sort(order[:len(order) - d])
        low = knn_gcn(cfg, ds.with_features(keep_low), seed).test_accuracy
        high = knn_gcn(cfg, ds.with_features(keep_high), seed).test_accuracy
    report.mode = "features"
    report.baseline_accuracy = base
    report.deleted_low_accuracy = low
    report.deleted_high_accuracy = high
    report.deleted_count = d
    report.wall_time = time.perf_counter() - t0
    return report


def _summary(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def monte_carlo(cfg, fn, seeds=None):
    """Run ``fn(cfg, seed)`` for ``cfg.seeds`` consecutive seeds; first report carries the summary."""
    n = cfg.seeds if seeds is None else seeds
    reports = [fn(cfg, seed=cfg.seed + i) for i in range(n)]
    if n == 1:
        return reports[0], reports
    head = reports[0]
    mean, std = _summary([r.test_accuracy for r in reports])
    summary = {"seeds": [r.seed for r in reports], "test_mean": mean, "test_std": std,
               "test_per_seed": [r.test_accuracy for r in reports]}
    for key in ("clean_test_accuracy", "baseline_accuracy", "deleted_low_accuracy",
                "deleted_high_accuracy", "noise_remaining"):
        per_seed = [getattr(r, key) for r in reports]
        if any(v is not None for v in per_seed):
            m, s = _summary(per_seed)
            summary[f"{key}_mean"], summary[f"{key}_std"] = m, s
            summary[f"{key}_per_seed"] = per_seed
    head.monte_carlo = summary
    head.wall_time = sum(r.wall_time for r in reports)
    return head, reports


def sweep(cfg, param, values, fn=run_train):
    """One run per value of ``param`` (``k``, ``M``/``modules`` or ``K``/``hops``)."""
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose from {', '.join(SWEEPABLE)}")
    attr = SWEEPABLE[param]
    if not values:
        raise ConfigError("sweep needs at least one value")
    reports = []
    for v in values:
        try:
            sub = replace(cfg, **{attr: int(v)})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        head, _ = monte_carlo(sub, fn)
        reports.append((int(v), head))
    return reports


def graph_memory_bytes(n, modules):
    """Rough upper bound on dense N x N buffers held during one step."""
    return int(8 * n * n * (4 + 3 * modules))


def dense_to_edges(a):
    a = a.toarray() if sparse.issparse(a) else np.asarray(a)
    return EdgeList.from_matrix(a)
