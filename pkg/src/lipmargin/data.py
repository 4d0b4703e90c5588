"""Datasets: seeded Gaussian blobs, IDX (MNIST-style) files, and an .npz container."""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    InputError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "heldout")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray = None
    num_classes: int = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise InputError("features must be a 2-D array")
        if self.labels.shape != (n,):
            raise InputError("one label per sample is required")
        if not np.all(np.isfinite(self.features)):
            raise InputError("features contain NaN or Inf")
        if self.split is None:
            self.split = np.full(n, "train")
        self.split = np.asarray(self.split, dtype="<U7")
        if self.split.shape != (n,) or not np.all(np.isin(self.split, SPLITS)):
            raise InputError(f"split tags must be one of {SPLITS} for every sample")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, which: str) -> "Dataset":
        mask = self.split == which
        return Dataset(self.features[mask], self.labels[mask], self.split[mask],
                       self.num_classes, dict(self.provenance))

    @property
    def train(self):
        return self.subset("train")

    @property
    def heldout(self):
        return self.subset("heldout")

    def save(self, path):
        with open(path, "wb") as fh:
            np.savez(fh, features=self.features, labels=self.labels, split=self.split,
                     num_classes=np.int64(self.num_classes),
                     provenance=np.array(json.dumps(self.provenance, sort_keys=True)))

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["features"], z["labels"], z["split"], int(z["num_classes"]),
                       json.loads(str(z["provenance"])))


def generate_blobs(n_per_class, num_classes, dim, centers_seed=0, noise_sigma=1.0,
                   sample_seed=0, center_scale=3.0, heldout_per_class=0) -> Dataset:
    """Isotropic Gaussian clusters around seeded random centers.

    Centers are drawn from ``N(0, center_scale^2 I)`` with ``centers_seed``;
    samples use ``sample_seed``.  The first ``n_per_class`` samples of each
    class are tagged ``train``, the next ``heldout_per_class`` ``heldout``.
    """
    if n_per_class < 1 or num_classes < 1 or dim < 1 or heldout_per_class < 0:
        raise InputError("blob sizes must be positive")
    if noise_sigma < 0:
        raise InputError("noise_sigma must be nonnegative")
    centers = np.random.default_rng(centers_seed).normal(0.0, center_scale, (num_classes, dim))
    rng = np.random.default_rng(sample_seed)
    feats, labels, split = [], [], []
    for which, count in (("train", n_per_class), ("heldout", heldout_per_class)):
        for c in range(num_classes):
            feats.append(centers[c] + noise_sigma * rng.standard_normal((count, dim)))
            labels.append(np.full(count, c))
            split.append(np.full(count, which))
    return Dataset(
        np.concatenate(feats), np.concatenate(labels), np.concatenate(split), num_classes,
        provenance={
            "generator": "blobs",
            "n_per_class": int(n_per_class),
            "heldout_per_class": int(heldout_per_class),
            "num_classes": int(num_classes),
            "dim": int(dim),
            "centers_seed": int(centers_seed),
            "sample_seed": int(sample_seed),
            "noise_sigma": float(noise_sigma),
            "center_scale": float(center_scale),
        },
    )


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf, magic, ndims, what):
    header = 4 + 4 * ndims
    if len(buf) < 4:
        raise IdxTruncatedError(f"{what} file is truncated (no magic number)")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IdxMagicError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(buf) < header:
        raise IdxTruncatedError(f"{what} file is truncated inside its header")
    dims = struct.unpack(">" + "I" * ndims, buf[4:header])
    size = int(np.prod(dims))
    if len(buf) < header + size:
        raise IdxTruncatedError(
            f"{what} file holds {len(buf) - header} data bytes, header promises {size}"
        )
    return dims, np.frombuffer(buf, dtype=np.uint8, count=size, offset=header)


def load_idx(images_path, labels_path, num_classes=None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled from bytes to [0, 1]."""
    img_buf, lab_buf = _read_bytes(images_path), _read_bytes(labels_path)
    (count, rows, cols), pixels = _parse_idx(img_buf, IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,), labels = _parse_idx(lab_buf, IDX_LABELS_MAGIC, 1, "labels")
    if n_labels != count:
        raise IdxCountMismatchError(f"{count} images but {n_labels} labels")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    digest = hashlib.sha256(img_buf + lab_buf).hexdigest()
    return Dataset(features, labels.astype(np.int64), None, num_classes,
                   provenance={"source": "idx", "sha256": digest})


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (count, rows, cols) and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())
