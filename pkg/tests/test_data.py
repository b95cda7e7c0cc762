import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xpfl import data as D
from xpfl import explain
from xpfl.numkit import ParameterError, UsageError


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12).filter(lambda w: sum(w) > 0),
       st.integers(0, 500))
def test_largest_remainder_sums_and_is_close(weights, total):
    counts = D.largest_remainder(weights, total)
    assert counts.sum() == total
    exact = np.asarray(weights) / np.sum(weights) * total
    assert np.all(np.abs(counts - exact) < 1.0)


def test_n_labeled_rule():
    assert D.n_labeled_for(0, 0.1) == 0
    assert D.n_labeled_for(5, 0.1) == 1
    assert D.n_labeled_for(100, 0.1) == 10
    assert D.n_labeled_for(7, 1.0) == 7


def check_partition(ds, shards, spec):
    assert len(shards) == spec.clients
    every = np.concatenate([s.all_idx for s in shards])
    assert len(every) == len(ds) and len(np.unique(every)) == len(ds)
    for s in shards:
        assert len(s) > 0
        assert s.n_labeled == D.n_labeled_for(len(s), spec.gamma)
        assert len(np.intersect1d(s.labeled_idx, s.unlabeled_idx)) == 0


@given(st.integers(1, 12), st.floats(0.05, 10.0), st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_partition_conservation(K, eta, gamma, seed):
    ds = D.synth_shapes(150, 5, seed=seed % 97)
    spec = D.PartitionSpec(K, eta, gamma, seed)
    check_partition(ds, D.partition_dirichlet(ds, spec), spec)


def test_partition_deterministic():
    ds = D.synth_shapes(200, 4, seed=1)
    a = D.partition_dirichlet(ds, D.PartitionSpec(5, 0.3, 0.2, 9))
    b = D.partition_dirichlet(ds, D.PartitionSpec(5, 0.3, 0.2, 9))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.labeled_idx, y.labeled_idx)
        np.testing.assert_array_equal(x.unlabeled_idx, y.unlabeled_idx)


def mean_client_entropy(shards):
    return np.mean([explain.entropy(s.class_counts()) for s in shards])


@pytest.mark.parametrize("seed", range(5))
def test_smaller_eta_means_more_skew(seed):
    ds = D.synth_shapes(1000, 10, seed=seed)
    grid = [0.1, 0.3, 0.5, 1.0, 5.0]
    ent = [mean_client_entropy(D.partition_dirichlet(ds, D.PartitionSpec(10, eta, 0.1, seed))) for eta in grid]
    assert all(a <= b for a, b in zip(ent, ent[1:]))


def test_partition_errors():
    ds = D.synth_shapes(5, 2, seed=0)
    with pytest.raises(UsageError):
        D.partition_dirichlet(ds, D.PartitionSpec(clients=6))
    with pytest.raises(ParameterError):
        D.PartitionSpec(eta=0)
    with pytest.raises(ParameterError):
        D.PartitionSpec(gamma=1.5)


def test_manifest_roundtrip(tmp_path):
    ds = D.synth_shapes(120, 4, seed=2)
    shards = D.partition_dirichlet(ds, D.PartitionSpec(4, 0.5, 0.25, 2))
    D.write_manifest(tmp_path / "p.json", shards)
    back = D.shards_from_manifest(json.loads((tmp_path / "p.json").read_text()), ds)
    for a, b in zip(shards, back):
        np.testing.assert_array_equal(a.labeled_idx, b.labeled_idx)
        np.testing.assert_array_equal(a.unlabeled_idx, b.unlabeled_idx)
        np.testing.assert_array_equal(a.class_counts(), b.class_counts())


def test_idx_roundtrip_is_lossless(tmp_path):
    ds = D.synth_shapes(30, 6, seed=3)
    D.write_idx(ds, tmp_path / "i", tmp_path / "l")
    back = D.load_idx(tmp_path / "i", tmp_path / "l", 6)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_idx_multichannel(tmp_path):
    ds = D.synth_shapes(4, 3, channels=3, seed=0)
    D.write_idx(ds, tmp_path / "i", tmp_path / "l")
    assert D.load_idx(tmp_path / "i", tmp_path / "l").images.shape == (4, 16, 16, 3)


def test_idx_errors(tmp_path):
    ds = D.synth_shapes(10, 3, seed=0)
    D.write_idx(ds, tmp_path / "i", tmp_path / "l")
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "bad").write_bytes(struct.pack(">I", 0x0999) + raw[4:])
    with pytest.raises(D.BadMagicError):
        D.load_idx(tmp_path / "bad", tmp_path / "l")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(D.TruncatedFileError):
        D.load_idx(tmp_path / "short", tmp_path / "l")
    D.write_idx(ds.subset(np.arange(8)), tmp_path / "i8", tmp_path / "l8")
    with pytest.raises(D.CountMismatchError):
        D.load_idx(tmp_path / "i", tmp_path / "l8")


def test_synth_shapes_properties():
    ds = D.synth_shapes(50, 10, seed=4)
    assert ds.images.shape == (50, 16, 16, 1)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    np.testing.assert_array_equal(ds.images * 255, np.rint(ds.images * 255))
    again = D.synth_shapes(50, 10, seed=4)
    np.testing.assert_array_equal(ds.images, again.images)


def test_synth_classes_are_distinguishable():
    tr = D.synth_shapes(400, 10, seed=0)
    te = D.synth_shapes(100, 10, seed=1)
    a = tr.images.reshape(len(tr), -1)
    b = te.images.reshape(len(te), -1)
    d = ((b[:, None, :] - a[None, :, :]) ** 2).sum(-1)
    acc = np.mean(tr.labels[d.argmin(1)] == te.labels)
    assert acc > 0.8


def test_dataset_validation():
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((3, 4, 4)), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 4, 4)), np.array([0, 5]), 2)
