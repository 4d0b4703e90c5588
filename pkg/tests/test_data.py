import gzip
import struct

import numpy as np
import pytest

from lipmargin.data import Dataset, generate_blobs, load_idx, write_idx
from lipmargin.exceptions import (
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    InputError,
)


def test_blobs_are_seeded_and_split():
    a = generate_blobs(10, 3, 4, centers_seed=1, sample_seed=2, heldout_per_class=5)
    b = generate_blobs(10, 3, 4, centers_seed=1, sample_seed=2, heldout_per_class=5)
    np.testing.assert_array_equal(a.features, b.features)
    assert len(a.train) == 30 and len(a.heldout) == 15
    assert np.bincount(a.train.labels).tolist() == [10, 10, 10]
    c = generate_blobs(10, 3, 4, centers_seed=1, sample_seed=3)
    assert not np.array_equal(a.train.features, c.features)


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 2)), [0])
    with pytest.raises(InputError):
        Dataset(np.array([[np.nan, 0.0]]), [0])
    with pytest.raises(InputError):
        Dataset(np.zeros((1, 2)), [0], ["test"])
    with pytest.raises(InputError):
        Dataset(np.zeros((1, 2)), [3], num_classes=2)


def test_npz_round_trip(tmp_path):
    d = generate_blobs(5, 2, 3, heldout_per_class=2)
    d.save(tmp_path / "d.npz")
    back = Dataset.load(tmp_path / "d.npz")
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.split, d.split)
    assert back.provenance == d.provenance


@pytest.fixture
def idx_pair(tmp_path):
    images = np.arange(2 * 3 * 2, dtype=np.uint8).reshape(2, 3, 2) * 20
    labels = np.array([7, 1], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, ip, lp)
    return ip, lp, images, labels


def test_idx_parses_hand_built_bytes(idx_pair):
    ip, lp, images, labels = idx_pair
    raw = ip.read_bytes()
    assert raw[:16] == struct.pack(">IIII", 0x803, 2, 3, 2)
    d = load_idx(ip, lp, num_classes=10)
    assert d.features.shape == (2, 6)
    np.testing.assert_allclose(d.features[1], images[1].reshape(-1) / 255.0)
    assert d.labels.tolist() == [7, 1]
    assert len(d.provenance["sha256"]) == 64


def test_idx_gzip(idx_pair, tmp_path):
    ip, lp, _, _ = idx_pair
    gi, gl = tmp_path / "img.gz", tmp_path / "lab.gz"
    gi.write_bytes(gzip.compress(ip.read_bytes()))
    gl.write_bytes(gzip.compress(lp.read_bytes()))
    assert load_idx(gi, gl).features.shape == (2, 6)


def test_idx_errors(idx_pair, tmp_path):
    ip, lp, _, _ = idx_pair
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">I", 0x802) + ip.read_bytes()[4:])
    with pytest.raises(IdxMagicError):
        load_idx(bad, lp)
    bad.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(IdxTruncatedError):
        load_idx(bad, lp)
    bad.write_bytes(ip.read_bytes()[:10])
    with pytest.raises(IdxTruncatedError):
        load_idx(bad, lp)
    bad.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(IdxCountMismatchError):
        load_idx(ip, bad)


def test_blob_examples(tmp_path):
    from sklearn.svm import LinearSVC

    d = generate_blobs(4, 3, 2, centers_seed=0, noise_sigma=0.0)
    for c in range(3):
        rows = d.features[d.labels == c]
        assert np.all(rows == rows[0])
    a = generate_blobs(20, 2, 3, centers_seed=9, sample_seed=10)
    a.save(tmp_path / "a.npz")
    generate_blobs(20, 2, 3, centers_seed=9, sample_seed=10).save(tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    sep = generate_blobs(100, 2, 2, centers_seed=2, noise_sigma=0.05, sample_seed=1)
    clf = LinearSVC(C=100.0).fit(sep.features, sep.labels)
    assert clf.score(sep.features, sep.labels) == 1.0


def test_two_by_two_idx_fixture(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    ip.write_bytes(bytes.fromhex("00000803 00000002 00000002 00000002".replace(" ", ""))
                   + bytes([0, 0, 0, 0, 255, 255, 255, 255]))
    lp.write_bytes(bytes.fromhex("00000801 00000002".replace(" ", "")) + bytes([0, 1]))
    d = load_idx(ip, lp)
    np.testing.assert_array_equal(d.features, [[0, 0, 0, 0], [1, 1, 1, 1]])
    assert d.labels.tolist() == [0, 1]
