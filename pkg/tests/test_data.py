import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_meta import model as M
from implicit_meta.data import (
    Dataset,
    IdxFormatError,
    SplitSpec,
    downsample_2x,
    encode_idx_images,
    encode_idx_labels,
    load_idx,
    subsample,
    synth_blobs,
)


@pytest.fixture
def idx_pair(tmp_path):
    images = np.array([[[0, 255], [128, 64]], [[1, 2], [3, 4]]], dtype=np.uint8)
    labels = np.array([3, 1], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    ip.write_bytes(encode_idx_images(images))
    lp.write_bytes(encode_idx_labels(labels))
    return ip, lp


def test_load_idx_scaling(idx_pair):
    ds = load_idx(*idx_pair)
    np.testing.assert_allclose(ds.inputs[0], [0.0, 1.0, 128 / 255, 64 / 255])
    assert ds.labels.tolist() == [3, 1]
    assert ds.num_classes == 4


def test_idx_bytes_roundtrip(idx_pair):
    ip, lp = idx_pair
    ds = load_idx(ip, lp)
    pixels = np.rint(ds.inputs * 255).astype(np.uint8).reshape(2, 2, 2)
    assert encode_idx_images(pixels) == ip.read_bytes()
    assert encode_idx_labels(ds.labels) == lp.read_bytes()


def test_idx_count_mismatch(idx_pair, tmp_path):
    bad = tmp_path / "three.idx"
    bad.write_bytes(encode_idx_labels([0, 1, 2]))
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(idx_pair[0], bad)


def test_idx_empty_and_truncated(idx_pair, tmp_path):
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(empty, idx_pair[1])
    cut = tmp_path / "cut"
    cut.write_bytes(idx_pair[0].read_bytes()[:-1])
    with pytest.raises(IdxFormatError, match="payload"):
        load_idx(cut, idx_pair[1])


def test_idx_bad_magic(idx_pair, tmp_path):
    swapped = tmp_path / "swap"
    swapped.write_bytes(struct.pack(">IIII", 0x801, 2, 2, 2) + bytes(8))
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(swapped, idx_pair[1])


def test_blobs_deterministic_and_zero_spread():
    a = synth_blobs(3, 10, 4, 5, 0.2)
    b = synth_blobs(3, 10, 4, 5, 0.2)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    z = synth_blobs(0, 5, 3, 4, 0.0)
    assert len({tuple(x) for x in z.inputs}) == 3


def test_blobs_random_layout_every_feature_informative():
    ds = synth_blobs(0, 50, 5, 16, 0.1, layout="random")
    per_class = np.array([ds.inputs[ds.labels == c].mean(0) for c in range(5)])
    assert np.all(per_class.std(axis=0) > 0.05)
    with pytest.raises(ValueError):
        synth_blobs(0, 5, 3, 4, 0.1, layout="spiral")


def test_blobs_separable_with_small_spread():
    from implicit_meta.metaopt import InnerOptState
    ds = synth_blobs(0, 60, 4, 6, 0.1)
    train, _, test = subsample(ds, SplitSpec(120, 20, 100, seed=0))
    p = M.MlpParams.init(np.random.default_rng(0), 6, 6, 4)
    opt = InnerOptState(kind="adam", lr=1e-2)
    x = p.flat()
    for _ in range(2000):
        _, g = M.ce_grad(p.like(x), train.batch())
        x = opt.step(x, g.flat())
    assert M.accuracy(p.like(x), test.batch()) > 0.95


def test_downsample_examples(rng):
    np.testing.assert_array_equal(downsample_2x(np.full((2, 16), 0.7)), np.full((2, 4), 0.7))
    img = np.zeros((4, 4))
    img[:2, :2] = 1
    out = downsample_2x(img.reshape(1, 16)).reshape(2, 2)
    np.testing.assert_array_equal(out, [[1, 0], [0, 0]])
    x = rng.random((3, 784))
    out = downsample_2x(x)
    naive = np.zeros((3, 196))
    for n in range(3):
        im = x[n].reshape(28, 28)
        for i in range(14):
            for j in range(14):
                naive[n, i * 14 + j] = im[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean()
    np.testing.assert_allclose(out, naive, atol=1e-15)
    with pytest.raises(ValueError):
        downsample_2x(np.zeros((1, 9)))


@given(st.integers(0, 1000))
def test_downsample_preserves_mean(seed):
    x = np.random.default_rng(seed).random((2, 64))
    assert downsample_2x(x).mean() == pytest.approx(x.mean(), abs=1e-14)


def test_subsample_stratified_sizes():
    ds = synth_blobs(0, 30, 10, 3, 0.1)
    tr, va, te = subsample(ds, SplitSpec(50, 50, 50, seed=1))
    for part in (tr, va, te):
        assert np.bincount(part.labels, minlength=10).tolist() == [5] * 10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), stratified=st.booleans(), sizes=st.tuples(
    st.integers(1, 40), st.integers(1, 40), st.integers(1, 40)))
def test_subsample_disjoint_and_deterministic(seed, stratified, sizes):
    ds = synth_blobs(0, 40, 3, 2, 0.1)
    spec = SplitSpec(*sizes, seed=seed, stratified=stratified)
    parts = subsample(ds, spec)
    idx = [set(p.indices.tolist()) for p in parts]
    assert [len(s) for s in idx] == list(sizes)
    assert not (idx[0] & idx[1]) and not (idx[0] & idx[2]) and not (idx[1] & idx[2])
    again = subsample(ds, spec)
    for a, b in zip(parts, again):
        np.testing.assert_array_equal(a.indices, b.indices)
    for p in parts:
        np.testing.assert_array_equal(p.inputs, ds.inputs[p.indices])


def test_subsample_infeasible():
    ds = synth_blobs(0, 5, 2, 2, 0.1)
    with pytest.raises(ValueError):
        subsample(ds, SplitSpec(5, 5, 5))


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), 3)
