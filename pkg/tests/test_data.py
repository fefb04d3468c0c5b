import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anodev2.data import (CifarFormatError, LabeledBatch, augment, crop_offsets, denormalize, load_cifar10,
                          load_cifar10_split, normalize, parse_cifar10, synthetic_blobs, to_binary)
from anodev2.layers import linear, linear_backward, softmax_cross_entropy


def record(label, pixels):
    return bytes([label]) + np.asarray(pixels, np.uint8).tobytes()


def test_all_white_record(tmp_path):
    path = tmp_path / "one.bin"
    path.write_bytes(record(6, [255] * 3072))
    b = load_cifar10(str(path))
    assert b.labels.tolist() == [6]
    assert b.images[0, 0, 0, 0] == pytest.approx((1 - 0.4914) / 0.2470)
    assert b.images[0, 0, 0, 0] == pytest.approx(2.059, abs=1e-3)


def test_channel_layout_is_planar_row_major():
    px = np.zeros(3072, np.uint8)
    px[1024 + 32 * 2 + 5] = 255  # green plane, row 2, column 5
    b = parse_cifar10(record(0, px))
    assert denormalize(b.images)[0, 1, 2, 5] == 255
    assert denormalize(b.images)[0].sum() == 255


def test_empty_and_two_records(tmp_path):
    assert len(parse_cifar10(b"")) == 0
    b = parse_cifar10(record(1, [0] * 3072) + record(2, [9] * 3072))
    assert b.images.shape == (2, 3, 32, 32)
    assert b.labels.tolist() == [1, 2]


def test_bad_size_and_bad_label():
    with pytest.raises(CifarFormatError, match="multiple of 3073"):
        parse_cifar10(b"\x00" * 3000)
    with pytest.raises(CifarFormatError, match="record 1"):
        parse_cifar10(record(3, [0] * 3072) + record(10, [0] * 3072))


def test_directory_layout(tmp_path):
    for i in (1, 2):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(record(i, [i] * 3072))
    (tmp_path / "test_batch.bin").write_bytes(record(9, [0] * 3072))
    tr, te = load_cifar10_split(str(tmp_path))
    assert tr.labels.tolist() == [1, 2] and te.labels.tolist() == [9]
    with pytest.raises(FileNotFoundError):
        load_cifar10_split(str(tmp_path / "missing"))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_binary_roundtrip(seed, n):
    rng = np.random.default_rng(seed)
    raw = b"".join(record(int(rng.integers(10)), rng.integers(0, 256, 3072)) for _ in range(n))
    assert to_binary(parse_cifar10(raw)) == raw


@given(st.lists(st.integers(0, 255), min_size=3, max_size=3))
def test_normalization_invertible(vals):
    px = np.broadcast_to(np.array(vals, np.uint8)[None, :, None, None], (1, 3, 2, 2))
    np.testing.assert_array_equal(denormalize(normalize(px)), px)


def test_augment_deterministic_and_disabled():
    b = synthetic_blobs(8, seed=1)
    a1, a2 = augment(b, 42), augment(b, 42)
    np.testing.assert_array_equal(a1.images, a2.images)
    assert not np.array_equal(augment(b, 43).images, a1.images)
    assert augment(b, 42, enabled=False) is b


def test_augment_crop_and_flip_semantics():
    img = np.arange(3 * 32 * 32, dtype=float).reshape(1, 3, 32, 32)
    b = LabeledBatch(img, np.array([0]))
    out = augment(b, 7).images[0]
    dy, dx = crop_offsets(1, 7)[0]
    padded = np.pad(img[0], ((0, 0), (4, 4), (4, 4)), mode="reflect")
    crop = padded[:, dy:dy + 32, dx:dx + 32]
    assert np.array_equal(out, crop) or np.array_equal(out, crop[:, :, ::-1])


def test_crop_offsets_uniform():
    off = crop_offsets(100_000, 123)
    counts = np.zeros((9, 9))
    np.add.at(counts, (off[:, 0], off[:, 1]), 1)
    expected = 100_000 / 81
    assert np.abs(counts / expected - 1).max() < 0.1
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 130  # 80 dof, p ~ 1e-4


def test_synthetic_blobs_balanced_and_deterministic():
    b = synthetic_blobs(10, seed=5)
    assert sorted(b.labels.tolist()) == list(range(10))
    np.testing.assert_array_equal(b.images, synthetic_blobs(10, seed=5).images)
    assert np.bincount(synthetic_blobs(1000).labels).tolist() == [100] * 10


def test_synthetic_blobs_linearly_separable():
    train = synthetic_blobs(1000, seed=0)
    test = synthetic_blobs(500, seed=1)
    x = train.images.reshape(1000, -1)
    w = np.zeros((10, x.shape[1]))
    b = np.zeros(10)
    for _ in range(50):
        out, cache = linear(x, w, b)
        _, g = softmax_cross_entropy(out, train.labels)
        _, dw, db = linear_backward(g, cache)
        w -= 0.01 * dw
        b -= 0.01 * db
    pred = linear(test.images.reshape(500, -1), w, b)[0].argmax(1)
    assert (pred == test.labels).mean() >= 0.9
