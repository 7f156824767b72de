import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glgnn.data import (
    DataError, Dataset, SyntheticSpec, builtin, load_csv, load_manifest, make_splits, one_hot,
    scale_rows, standardize, synth, write_csv,
)


def test_one_hot_sorted_classes():
    np.testing.assert_array_equal(one_hot([5, 2, 5]), [[0, 1], [1, 0], [0, 1]])
    assert one_hot([3, 3]).shape == (2, 2)
    np.testing.assert_array_equal(one_hot([5, 2, 5], order="first"), [[1, 0], [0, 1], [1, 0]])
    with pytest.raises(ValueError):
        one_hot([1], order="random")


def test_load_csv_numbers_classes_by_first_appearance(tmp_path):
    (tmp_path / "x.csv").write_text("1\n2\n3\n", encoding="utf-8")
    (tmp_path / "y.csv").write_text("1\n0\n1\n", encoding="utf-8")
    ds = load_csv(tmp_path / "x.csv", tmp_path / "y.csv")
    np.testing.assert_array_equal(ds.labels, [0, 1, 0])
    assert ds.C == 2


def test_csv_roundtrip(tmp_path):
    ds, _ = synth(SyntheticSpec(per_class=4, informative=2, noise=1, edge_prob=0.5))
    write_csv(ds, tmp_path / "x.csv", tmp_path / "y.csv", tmp_path / "g.tsv", header=True)
    back = load_csv(tmp_path / "x.csv", tmp_path / "y.csv", header=True, graph_path=tmp_path / "g.tsv")
    np.testing.assert_array_equal(back.X, ds.X)
    # same partition; class ids follow first appearance in the file
    _, first = np.unique(ds.labels, return_index=True)
    remap = np.argsort(np.argsort(first))
    np.testing.assert_array_equal(back.labels, remap[ds.labels])
    assert back.names == ds.names
    assert back.graph.pairs() == ds.graph.pairs()


def test_csv_errors_carry_location(tmp_path):
    (tmp_path / "x.csv").write_text("1,2\n3\n", encoding="utf-8")
    (tmp_path / "y.csv").write_text("0\n1\n", encoding="utf-8")
    with pytest.raises(DataError, match=r"x.csv:2: expected 2 columns"):
        load_csv(tmp_path / "x.csv", tmp_path / "y.csv")
    (tmp_path / "x.csv").write_text("1,2\n3,abc\n", encoding="utf-8")
    with pytest.raises(DataError, match=r"x.csv:2: non-numeric"):
        load_csv(tmp_path / "x.csv", tmp_path / "y.csv")
    (tmp_path / "x.csv").write_text("1,2\n3,4\n", encoding="utf-8")
    (tmp_path / "y.csv").write_text("0\n", encoding="utf-8")
    with pytest.raises(DataError, match="2 feature rows but 1 labels"):
        load_csv(tmp_path / "x.csv", tmp_path / "y.csv")
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        load_csv(tmp_path / "nope.csv", tmp_path / "y.csv")


def test_manifest_resolves_relative_paths(tmp_path):
    ds, _ = synth(SyntheticSpec(per_class=3, informative=2))
    sub = tmp_path / "d"
    sub.mkdir()
    write_csv(ds, sub / "x.csv", sub / "y.csv")
    (sub / "m.json").write_text(json.dumps(
        {"features": "x.csv", "labels": "y.csv", "name": "toy", "split": {"train": 2, "val": 1}}))
    back, split = load_manifest(sub / "m.json")
    assert back.name == "toy" and split == {"train": 2, "val": 1}
    with pytest.raises(FileNotFoundError, match="absent.json"):
        load_manifest(tmp_path / "absent.json")


@pytest.mark.parametrize("name,shape,classes", [
    ("wine", (178, 13), 3), ("cancer", (569, 30), 2), ("digits", (1797, 64), 10)])
def test_builtin_shapes(name, shape, classes):
    ds = builtin(name)
    assert ds.X.shape == shape and ds.C == classes
    with pytest.raises(DataError):
        builtin("iris")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(3, 30), st.integers(0, 40))
def test_splits_are_disjoint_seeded_and_cover_classes(seed, n_train, n_val):
    ds = builtin("wine")
    a = make_splits(ds, n_train, n_val, seed)
    b = make_splits(ds, n_train, n_val, seed)
    np.testing.assert_array_equal(a.train, b.train)
    assert len(a.train) == n_train and len(a.val) == n_val
    assert len(a.train) + len(a.val) + len(a.test) == ds.N
    assert not set(a.train) & set(a.val)
    assert not (set(a.train) | set(a.val)) & set(a.test)
    assert len(np.unique(ds.labels[a.train])) == 3


def test_split_errors():
    ds = builtin("wine")
    with pytest.raises(DataError):
        make_splits(ds, 2, 0, seed=0)  # fewer rows than classes
    with pytest.raises(DataError):
        make_splits(ds, 100, 100, seed=0)
    with pytest.raises(DataError, match="strict"):
        make_splits(ds, 10, 20, seed=0, n_test=100, strict=True)


def test_standardize_uses_training_statistics():
    X = np.array([[0.0, 1.0], [2.0, 1.0], [10.0, 1.0]])
    ds = Dataset(X, np.eye(3)[:, :2][[0, 1, 0]], train=[0, 1])
    out = standardize(ds).X
    np.testing.assert_allclose(out[:, 0], [-1.0, 1.0, 9.0])
    np.testing.assert_array_equal(out[:, 1], [0.0, 0.0, 0.0])


def test_scale_rows():
    ds = Dataset(np.array([[3.0, 4.0], [0.0, 0.0]]), np.eye(2))
    np.testing.assert_allclose(scale_rows(ds, 2.0).X, [[1.2, 1.6], [0.0, 0.0]])
    with pytest.raises(DataError):
        scale_rows(ds, 0.0)


def test_synthetic_ground_truth():
    ds, truth = synth(SyntheticSpec(per_class=20, informative=4, noise=3, classes=3,
                                    edge_prob=0.3, seed=2))
    assert ds.X.shape == (60, 7)
    np.testing.assert_array_equal(truth.informative, np.arange(4))
    lab = ds.labels
    assert all(lab[s] == lab[d] for s, d in truth.planted.pairs())
    means = np.array([ds.X[lab == c].mean(axis=0) for c in range(3)])
    # informative columns separate the classes, noise columns do not
    assert means[:, :4].std(axis=0).max() > 1.0
    assert means[:, 4:].std(axis=0).max() < 0.5
    with pytest.raises(DataError):
        SyntheticSpec(classes=1)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(DataError):
        Dataset(np.zeros((3,)), np.zeros((3, 2)))
