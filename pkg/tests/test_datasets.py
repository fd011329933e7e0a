import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from rfa.datasets import (IDX_IMAGES, IDX_LABELS, BatchPlan, Dataset, DatasetError, batch_indices, batches,
                          load_idx, synth_blobs, write_idx)


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (10, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 10, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(imgs, labels, ip, lp)
    return ip, lp, imgs, labels


def test_load_idx_scales_and_reshapes(idx_pair):
    ip, lp, imgs, labels = idx_pair
    ds = load_idx(ip, lp)
    assert ds.images.shape == (10, 1, 28, 28)
    np.testing.assert_array_equal(ds.images[:, 0], imgs / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.num_classes == 10


def test_load_idx_is_bit_exact_and_idempotent(idx_pair):
    ip, lp, *_ = idx_pair
    a, b = load_idx(ip, lp), load_idx(ip, lp)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_load_idx_count_mismatch(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    write_idx(np.zeros((10, 4, 4)), np.zeros(9), ip, lp)
    with pytest.raises(DatasetError, match="count mismatch"):
        load_idx(ip, lp)


def test_load_idx_wrong_magic(tmp_path, idx_pair):
    ip, lp, *_ = idx_pair
    raw = bytearray(ip.read_bytes())
    raw[:4] = struct.pack(">I", 0x00000802)
    bad = tmp_path / "bad.idx"
    bad.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="unsupported IDX type"):
        load_idx(bad, lp)


def test_load_idx_swapped_files(idx_pair):
    ip, lp, *_ = idx_pair
    with pytest.raises(DatasetError, match="unsupported IDX type"):
        load_idx(lp, ip)


def test_load_idx_truncated(tmp_path, idx_pair):
    ip, lp, *_ = idx_pair
    cut = tmp_path / "cut.idx"
    cut.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(DatasetError, match="truncated"):
        load_idx(cut, lp)
    cut.write_bytes(ip.read_bytes()[:6])
    with pytest.raises(DatasetError, match="truncated"):
        load_idx(cut, lp)


def test_idx_magic_constants():
    assert IDX_IMAGES == 0x00000803 and IDX_LABELS == 0x00000801


def test_dataset_rejects_out_of_range():
    with pytest.raises(DatasetError):
        Dataset(np.full((2, 1, 1, 2), 1.5), np.zeros(2), 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 1, 2)), np.array([0, 2]), 2)


def test_blobs_linear_probe_separates_training_set():
    ds = synth_blobs(7, 100, 3, 16, 0.05)
    x = ds.images.reshape(len(ds), -1)
    probe = LogisticRegression(max_iter=2000).fit(x, ds.labels)
    assert probe.score(x, ds.labels) >= 0.99


def test_blobs_zero_spread_sits_on_centers():
    ds = synth_blobs(3, 5, 3, 8, 0.0)
    x = ds.images.reshape(len(ds), -1)
    for c in range(3):
        pts = x[ds.labels == c]
        assert np.all(pts == pts[0])
    assert len({tuple(r) for r in x}) == 3


def test_blobs_same_seed_identical():
    a, b = synth_blobs(7, 20), synth_blobs(7, 20)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_blobs(8, 20).images)


def test_blobs_shape_range_and_balance():
    ds = synth_blobs(1, 30, 4, 12, 0.3)
    assert ds.images.shape == (120, 1, 1, 12)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.bincount(ds.labels).tolist() == [30] * 4


def test_blobs_split_layout_and_label_noise():
    clean = synth_blobs(2, 50, 3, 64, 0.05, layout="split")
    noisy = synth_blobs(2, 50, 3, 64, 0.05, layout="split", label_noise=0.2)
    assert np.array_equal(clean.images, noisy.images)
    frac = np.mean(clean.labels != noisy.labels)
    assert 0.1 < frac < 0.3


@pytest.mark.parametrize("kw", [dict(dim=1), dict(spread=-0.1), dict(num_classes=1), dict(layout="ring"),
                                dict(label_noise=1.0)])
def test_blobs_parameter_validation(kw):
    with pytest.raises(ValueError):
        synth_blobs(0, 5, **kw)


def test_batches_sizes_keep_short_tail():
    ds = synth_blobs(0, 5, 2, 4)
    sizes = [len(y) for _, y in batches(ds, BatchPlan(batch_size=3, shuffle_seed=1))]
    assert sizes == [3, 3, 3, 1]
    sizes = [len(y) for _, y in batches(ds, BatchPlan(batch_size=3, shuffle_seed=1, drop_last=True))]
    assert sizes == [3, 3, 3]


def test_batches_same_seed_same_order():
    plan = BatchPlan(batch_size=4, shuffle_seed=11)
    a = [i.tolist() for i in batch_indices(50, plan, epoch=2)]
    b = [i.tolist() for i in batch_indices(50, plan, epoch=2)]
    assert a == b
    assert a != [i.tolist() for i in batch_indices(50, plan, epoch=3)]


def test_batches_rejects_oversized_batch():
    with pytest.raises(ValueError):
        list(batches(synth_blobs(0, 2, 2, 4), BatchPlan(batch_size=10)))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 200), size=st.integers(1, 64), seed=st.integers(0, 2**32), epoch=st.integers(0, 5))
def test_batches_cover_every_index_once(n, size, seed, epoch):
    idx = np.concatenate(batch_indices(n, BatchPlan(batch_size=size, shuffle_seed=seed), epoch))
    assert sorted(idx.tolist()) == list(range(n))
