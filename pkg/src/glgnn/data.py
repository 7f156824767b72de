"""Datasets: CSV ingestion, built-in UCI sets, splits, standardization and
synthetic generators with known informative features and planted graphs."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph_ops import EdgeList, read_edgelist, write_edgelist

BUILTIN = ("wine", "cancer", "digits")

# Train/Val/Test triples as listed in the dataset table of the source study.
PUBLISHED_SPLITS = {
    "wine": (10, 20, 158),
    "cancer": (10, 20, 539),
    "digits": (50, 100, 1647),
    "citeseer": (120, 500, 1000),
    "cora": (140, 500, 1000),
    "20news": (100, 200, 9307),
    "fma": (160, 320, 7514),
}


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    train: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    val: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    graph: EdgeList | None = None
    names: list = field(default_factory=list)
    name: str = "dataset"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        for split in ("train", "val", "test"):
            setattr(self, split, np.asarray(getattr(self, split), dtype=np.int64))
        if self.X.ndim != 2 or self.X.shape[1] < 1:
            raise DataError("features must be an N x F matrix with F >= 1")
        if self.Y.shape[0] != self.X.shape[0] or self.Y.shape[1] < 2:
            raise DataError("labels must be an N x C one-hot matrix with C >= 2")
        if not self.names:
            self.names = [f"f{j}" for j in range(self.F)]

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def F(self):
        return self.X.shape[1]

    @property
    def C(self):
        return self.Y.shape[1]

    @property
    def labels(self):
        return self.Y.argmax(axis=1)

    def label_block(self):
        """One-hot labels on training rows, zeros on every other row."""
        block = np.zeros_like(self.Y)
        block[self.train] = self.Y[self.train]
        return block

    def with_features(self, keep):
        keep = np.asarray(keep, dtype=np.int64)
        return replace(self, X=self.X[:, keep], names=[self.names[j] for j in keep])


def one_hot(labels, order="sorted"):
    """One-hot rows.

    With ``order="sorted"`` class ``c`` is the ``c``-th smallest distinct label;
    ``order="first"`` numbers classes by first appearance instead.
    """
    classes, first, idx = np.unique(np.asarray(labels), return_index=True, return_inverse=True)
    if order == "first":
        rank = np.empty(len(classes), dtype=int)
        rank[np.argsort(first, kind="stable")] = np.arange(len(classes))
        idx = rank[idx.ravel()]
    elif order != "sorted":
        raise ValueError(f"unknown label order {order!r}")
    Y = np.zeros((len(idx), max(len(classes), 2)))
    Y[np.arange(len(idx)), idx.ravel()] = 1.0
    return Y


def _read_rows(path, header):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    start = 1 if header else 0
    return path, rows[:start], [(i + 1, r) for i, r in enumerate(rows) if i >= start and r]


def load_csv(features_path, labels_path, header=False, graph_path=None, name=None):
    """Read comma-separated features and integer labels (one per line)."""
    fpath, head, frows = _read_rows(features_path, header)
    width = None
    X = []
    for lineno, row in frows:
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DataError(f"{fpath}:{lineno}: expected {width} columns, found {len(row)}")
        try:
            X.append([float(c) for c in row])
        except ValueError:
            raise DataError(f"{fpath}:{lineno}: non-numeric cell in {row!r}") from None
    lpath, _, lrows = _read_rows(labels_path, header)
    labels = []
    for lineno, row in lrows:
        try:
            labels.append(int(row[0]))
        except ValueError:
            raise DataError(f"{lpath}:{lineno}: label {row[0]!r} is not an integer") from None
    if len(labels) != len(X):
        raise DataError(f"{len(X)} feature rows but {len(labels)} labels")
    if not X:
        raise DataError(f"{fpath}: no data rows")
    names = [c.strip() for c in head[0]] if head else []
    graph = read_edgelist(graph_path, len(X)) if graph_path else None
    return Dataset(np.array(X), one_hot(labels, order="first"), graph=graph, names=names,
                   name=name or Path(features_path).stem)


def write_csv(ds, features_path, labels_path, graph_path=None, header=False):
    with Path(features_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(ds.names)
        for row in ds.X.tolist():
            w.writerow([repr(v) for v in row])
    with Path(labels_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(["label"])
        for lab in ds.labels.tolist():
            w.writerow([lab])
    if graph_path and ds.graph is not None:
        write_edgelist(ds.graph, graph_path)


def load_manifest(path):
    """Dataset plus split sizes from a manifest JSON.

    Keys: ``features``, ``labels``, optional ``graph``, ``header``, ``name``
    and ``split`` (``{"train": int, "val": int}``). Relative paths resolve
    against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    spec = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent

    def resolve(key):
        value = spec.get(key)
        return None if value is None else str((base / value).resolve())

    try:
        ds = load_csv(resolve("features"), resolve("labels"), header=spec.get("header", False),
                      graph_path=resolve("graph"), name=spec.get("name", path.stem))
    except TypeError:
        raise DataError(f"{path}: manifest needs 'features' and 'labels'") from None
    return ds, spec.get("split", {})


def builtin(name):
    """Wine / Cancer / Digits from the copies bundled with scikit-learn."""
    from sklearn import datasets

    loaders = {
        "wine": datasets.load_wine,
        "cancer": datasets.load_breast_cancer,
        "digits": datasets.load_digits,
    }
    if name not in loaders:
        raise DataError(f"unknown built-in dataset {name!r}; choose from {', '.join(BUILTIN)}")
    raw = loaders[name]()
    names = list(getattr(raw, "feature_names", [])) or [f"px{j}" for j in range(raw.data.shape[1])]
    Y = np.zeros((len(raw.target), int(raw.target.max()) + 1))
    Y[np.arange(len(raw.target)), raw.target] = 1.0
    return Dataset(raw.data.astype(np.float64), Y, names=[str(n) for n in names], name=name)


# ---------------------------------------------------------------------------
# splits and scaling


def _alloc(sizes, total):
    # largest-remainder proportional allocation
    sizes = np.asarray(sizes, dtype=np.float64)
    if total == 0:
        return np.zeros(len(sizes), dtype=np.int64)
    share = sizes / sizes.sum() * total
    base = np.floor(share).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(share - base), kind="stable")
    base[order[:rest]] += 1
    return base


def make_splits(ds, n_train, n_val, seed, n_test=None, strict=False, max_retries=100):
    """Seeded stratified train/val masks; the test mask takes the remainder.

    ``strict`` requires ``n_train + n_val + n_test == N`` and raises otherwise.
    """
    N = ds.N
    if n_train < 0 or n_val < 0 or n_train + n_val > N:
        raise DataError(f"split {n_train}/{n_val} does not fit N={N}")
    if strict:
        if n_test is None or n_train + n_val + n_test != N:
            raise DataError(f"strict split {n_train}/{n_val}/{n_test} does not sum to N={N}")
    labels = ds.labels
    classes = np.unique(labels)
    if 0 < n_train < len(classes):
        raise DataError(f"{n_train} training rows cannot cover {len(classes)} classes")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        members = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
        sizes = [len(m) for m in members]
        tr = _alloc(sizes, n_train)
        if n_train and tr.min() == 0:
            deficit = np.flatnonzero(tr == 0)
            for c in deficit:
                donor = int(np.argmax(tr))
                tr[donor] -= 1
                tr[c] += 1
        left = [s - t for s, t in zip(sizes, tr)]
        va = _alloc(left, n_val) if sum(left) else np.zeros(len(members), dtype=np.int64)
        va = np.minimum(va, left)
        short = n_val - va.sum()
        for c in np.argsort(-np.asarray(left) + va, kind="stable"):
            if short <= 0:
                break
            extra = min(short, left[c] - va[c])
            va[c] += extra
            short -= extra
        train = np.concatenate([m[:t] for m, t in zip(members, tr)])
        val = np.concatenate([m[t:t + v] for m, t, v in zip(members, tr, va)])
        if n_train == 0 or len(np.unique(labels[train])) == len(classes):
            break
    else:
        raise DataError("could not draw a split with every class in the training set")
    taken = np.zeros(N, dtype=bool)
    taken[train] = True
    taken[val] = True
    test = np.flatnonzero(~taken)
    return replace(ds, train=np.sort(train), val=np.sort(val), test=test)


def standardize(ds):
    """Z-score every column with training-row statistics (all rows if no train mask)."""
    ref = ds.X[ds.train] if len(ds.train) else ds.X
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    return replace(ds, X=(ds.X - mean) / safe)


def scale_rows(ds, norm):
    """Rescale every feature row to Euclidean length ``norm`` (zero rows stay zero).

    Inner products then equal ``norm**2`` times cosine similarity, which keeps
    the relation softmax free of high-norm hubs.
    """
    if norm <= 0:
        raise DataError(f"row norm must be positive, got {norm}")
    lengths = np.linalg.norm(ds.X, axis=1, keepdims=True)
    return replace(ds, X=ds.X * (norm / np.where(lengths > 0, lengths, 1.0)))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    per_class: int = 40
    informative: int = 10
    noise: int = 0
    classes: int = 2
    separation: float = 6.0
    edge_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.per_class, self.informative, self.classes) < 1 or self.noise < 0:
            raise DataError("synthetic counts must be >= 1 (noise >= 0)")
        if self.classes < 2:
            raise DataError("synthetic data needs at least 2 classes")


@dataclass
class GroundTruth:
    informative: np.ndarray
    planted: EdgeList | None


def synth(spec):
    """Gaussian class blobs with pairwise centroid distance ``separation``.

    Centroids sit on orthogonal directions of the informative subspace, so
    every informative column carries signal; noise columns are N(0, 1).
    Same-class pairs are linked with probability ``edge_prob``.
    """
    rng = np.random.default_rng(spec.seed)
    d, C = spec.informative, spec.classes
    if C <= d:
        basis, _ = np.linalg.qr(rng.standard_normal((d, C)))
        centers = basis.T * (spec.separation / np.sqrt(2.0))
    else:
        centers = rng.standard_normal((C, d)) * spec.separation / np.sqrt(2.0 * d)
    labels = np.repeat(np.arange(C), spec.per_class)
    labels = labels[rng.permutation(len(labels))]
    N = len(labels)
    informative = centers[labels] + rng.standard_normal((N, d))
    X = np.hstack([informative, rng.standard_normal((N, spec.noise))])
    Y = np.zeros((N, C))
    Y[np.arange(N), labels] = 1.0
    names = [f"inf{j}" for j in range(d)] + [f"noise{j}" for j in range(spec.noise)]
    planted = None
    if spec.edge_prob > 0:
        iu, ju = np.triu_indices(N, k=1)
        same = labels[iu] == labels[ju]
        hit = same & (rng.random(len(iu)) < spec.edge_prob)
        planted = EdgeList(iu[hit], ju[hit], np.ones(hit.sum()), N)
    ds = Dataset(X, Y, graph=planted, names=names, name="synthetic")
    return ds, GroundTruth(np.arange(d), planted)
