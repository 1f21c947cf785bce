import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsv.data import (HONEST, MALICIOUS, LabeledDataset, PartitionSpec, client_classes,
                        load_idx, partition_noniid, split_validation, synth_blobs,
                        write_idx)
from fedsv.errors import (IdxConsistencyError, IdxFormatError, IdxLengthError,
                          PartitionError)
from fedsv.model_core import LOGISTIC, Architecture, Model, TrainConfig, evaluate, local_train


# ------------------------------------------------------------------------ IDX

def _fixture_bytes(tmp_path):
    pixels = np.array([[[0, 255, 128], [1, 2, 3]],
                       [[10, 20, 30], [40, 50, 60]]], dtype=np.uint8)
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 3) + pixels.tobytes())
    lab.write_bytes(struct.pack(">II", 0x801, 2) + bytes([7, 3]))
    return img, lab, pixels


def test_idx_fixture_roundtrip(tmp_path):
    img, lab, pixels = _fixture_bytes(tmp_path)
    ds = load_idx(img, lab)
    assert ds.features.shape == (2, 6)
    np.testing.assert_array_equal(ds.features * 255.0, pixels.reshape(2, 6).astype(float))
    assert ds.features[0, 1] == 1.0 and ds.features[0, 2] == 128 / 255
    np.testing.assert_array_equal(ds.labels, [7, 3])


def test_write_idx_matches_handmade(tmp_path):
    img, lab, pixels = _fixture_bytes(tmp_path)
    write_idx(tmp_path / "i2", tmp_path / "l2", pixels, [7, 3])
    assert (tmp_path / "i2").read_bytes() == img.read_bytes()
    assert (tmp_path / "l2").read_bytes() == lab.read_bytes()


def test_idx_gzip(tmp_path):
    import gzip
    img, lab, pixels = _fixture_bytes(tmp_path)
    for p in (img, lab):
        Path(str(p) + ".gz").write_bytes(gzip.compress(p.read_bytes()))
    ds = load_idx(str(img) + ".gz", str(lab) + ".gz")
    np.testing.assert_array_equal(ds.labels, [7, 3])


def test_idx_bad_magic(tmp_path):
    img, lab, _ = _fixture_bytes(tmp_path)
    with pytest.raises(IdxFormatError):
        load_idx(lab, lab)


def test_idx_truncated(tmp_path):
    img, lab, _ = _fixture_bytes(tmp_path)
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(IdxLengthError):
        load_idx(img, lab)


def test_idx_count_mismatch(tmp_path):
    img, lab, _ = _fixture_bytes(tmp_path)
    lab.write_bytes(struct.pack(">II", 0x801, 3) + bytes([7, 3, 1]))
    with pytest.raises(IdxConsistencyError):
        load_idx(img, lab)


def _mnist_paths(kind):
    base = os.environ.get("FEDSV_DATA_DIR")
    if not base:
        pytest.skip("FEDSV_DATA_DIR not set; MNIST files unavailable")
    prefix = "train" if kind == "train" else "t10k"
    paths = [Path(base) / f"{prefix}-images-idx3-ubyte", Path(base) / f"{prefix}-labels-idx1-ubyte"]
    for i, p in enumerate(paths):
        if not p.exists() and Path(str(p) + ".gz").exists():
            paths[i] = Path(str(p) + ".gz")
    if not all(p.exists() for p in paths):
        pytest.skip(f"MNIST {kind} files not found under {base}")
    return paths


def test_mnist_train_shape():
    ds = load_idx(*_mnist_paths("train"))
    assert ds.features.shape == (60000, 784)
    assert set(np.unique(ds.labels)) == set(range(10))


def test_mnist_test_shape():
    assert len(load_idx(*_mnist_paths("test"))) == 10000


# ---------------------------------------------------------------------- blobs

def test_blobs_counts_and_balance():
    ds = synth_blobs(10, 100, 20, 1.0, seed=0)
    assert ds.features.shape == (1000, 20)
    np.testing.assert_array_equal(ds.class_counts(), np.full(10, 100))


def test_blobs_deterministic():
    a = synth_blobs(4, 5, 6, 0.5, seed=3)
    b = synth_blobs(4, 5, 6, 0.5, seed=3)
    assert a.features.tobytes() == b.features.tobytes()


def test_blobs_zero_spread_on_vertices_and_separable():
    ds = synth_blobs(5, 8, 7, 0.0, seed=1)
    for x, y in zip(ds.features, ds.labels):
        expected = np.zeros(7)
        expected[y] = 3.0
        np.testing.assert_array_equal(x, expected)
    arch = Architecture(LOGISTIC, 7, 5)
    params = local_train(Model.zeros(arch), ds, TrainConfig(0.1, epochs=20, batch_size=8))
    assert evaluate(params, arch, ds)[1] == 1.0


def test_blobs_validation():
    with pytest.raises(ValueError):
        synth_blobs(10, 0, 20, 1.0, 0)
    with pytest.raises(ValueError):
        synth_blobs(10, 5, 4, 1.0, 0)


def test_split_validation_disjoint_and_complete():
    ds = synth_blobs(3, 10, 4, 1.0, seed=0)
    val, rest = split_validation(ds, 0.1, seed=5)
    assert len(val) == 3 and len(rest) == 27
    rows = {tuple(r) for r in val.features} | {tuple(r) for r in rest.features}
    assert len(rows) == 30


# ----------------------------------------------------------------- partition

def test_client_13_classes():
    assert client_classes(13, 10) == [3, 4, 5]


def test_each_class_entitled_to_six_clients():
    entitled = {c: [i for i in range(20) if c in client_classes(i, 10)] for c in range(10)}
    # enumeration: class c belongs to groups c-2, c-1, c, each holding clients g and g+10
    for c in range(10):
        assert len(entitled[c]) == 6
        assert sorted(i % 10 for i in entitled[c]) == sorted([(c - 2) % 10] * 2 + [(c - 1) % 10] * 2 + [c] * 2)


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(10, 100, 20, 1.0, seed=0)


def test_partition_exact_and_disjoint(blobs):
    shards = partition_noniid(blobs, PartitionSpec(20, 10, seed=1), malicious_count=8)
    assert sum(s.n_k for s in shards) == len(blobs)
    seen = set()
    for s in shards:
        for row in map(tuple, s.data.features):
            assert row not in seen
            seen.add(row)
    assert [s.role for s in shards] == [MALICIOUS] * 8 + [HONEST] * 12


def test_partition_classes_and_sizes(blobs):
    shards = partition_noniid(blobs, PartitionSpec(20, 10, seed=1))
    for s in shards:
        assert set(np.unique(s.data.labels)) == set(client_classes(s.client_id, 10))
    # 100 samples of a class over 6 clients -> 17,17,17,17,16,16 by ascending id
    holders = [s for s in shards if 0 in client_classes(s.client_id, 10)]
    counts = [int(np.sum(s.data.labels == 0)) for s in holders]
    assert [s.client_id for s in holders] == [0, 8, 9, 10, 18, 19]
    assert counts == [17, 17, 17, 17, 16, 16]


def test_partition_no_malicious(blobs):
    shards = partition_noniid(blobs, PartitionSpec(20, 10))
    assert all(s.role == HONEST for s in shards)


def test_partition_deterministic(blobs):
    a = partition_noniid(blobs, PartitionSpec(20, 10, seed=4))
    b = partition_noniid(blobs, PartitionSpec(20, 10, seed=4))
    for x, y in zip(a, b):
        assert x.data.features.tobytes() == y.data.features.tobytes()


def test_partition_independent_of_row_order(blobs):
    perm = np.random.default_rng(0).permutation(len(blobs))
    shuffled = blobs.subset(perm)
    a = partition_noniid(blobs, PartitionSpec(20, 10, seed=4))
    b = partition_noniid(shuffled, PartitionSpec(20, 10, seed=4))
    for x, y in zip(a, b):
        assert np.array_equal(np.bincount(x.data.labels, minlength=10),
                              np.bincount(y.data.labels, minlength=10))


def test_partition_too_few_samples():
    ds = synth_blobs(10, 5, 20, 1.0, seed=0)
    with pytest.raises(PartitionError):
        partition_noniid(ds, PartitionSpec(20, 10))


@given(n=st.integers(1, 30), m=st.integers(2, 8), cpc=st.integers(1, 8), seed=st.integers(0, 9))
@settings(max_examples=60, deadline=None)
def test_partition_invariants(n, m, cpc, seed):
    cpc = min(cpc, m)
    if len({c for i in range(n) for c in client_classes(i, m, cpc)}) < m:
        return  # some class has no owner; covered by the error test below
    ds = synth_blobs(m, 40, m, 1.0, seed=seed)
    shards = partition_noniid(ds, PartitionSpec(n, m, cpc, seed), malicious_count=n // 3)
    assert sum(s.n_k for s in shards) == len(ds)
    for s in shards:
        assert len(np.unique(s.data.labels)) == min(cpc, m)
    assert sum(s.role == MALICIOUS for s in shards) == n // 3


def test_partition_unowned_class():
    ds = synth_blobs(10, 10, 10, 1.0, seed=0)
    with pytest.raises(PartitionError):
        partition_noniid(ds, PartitionSpec(2, 10))
