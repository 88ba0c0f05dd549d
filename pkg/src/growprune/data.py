"""Datasets: IDX (MNIST) parsing, partitioning, shift augmentation, blobs."""

from __future__ import annotations

import gzip
import hashlib
import logging
import math
import os
import shutil
import struct
import tempfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .tensor import DTYPE

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# SHA-256 of the uncompressed files
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}

DEFAULT_MIRROR = "https://storage.googleapis.com/cvdf-datasets/mnist/"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    provenance: str = ""
    class_count: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, tag=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices],
                       tag or f"{self.provenance}[{len(indices)}]", self.class_count)

    def concat(self, other, tag=None):
        return Dataset(np.concatenate([self.images, other.images]),
                       np.concatenate([self.labels, other.labels]),
                       tag or f"{self.provenance}+{other.provenance}", self.class_count)


@dataclass
class PartitionPlan:
    seed: int
    k: int
    parts: list = field(default_factory=list)

    def indices(self, part_ids):
        if not part_ids:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([self.parts[i] for i in part_ids]))


# -- IDX ----------------------------------------------------------------------

def _read_idx(path, magic, ndim):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: file ends at byte {len(raw)} inside the {header}-byte header")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload mismatch at byte offset {min(len(raw), expected)}: "
            f"dims {dims} need {expected} bytes, file has {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, provenance=None):
    """Parse an IDX image/label pair into a Dataset with pixels in [0, 1]."""
    pixels = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if len(pixels) != len(labels):
        raise FormatError(f"{images_path}: {len(pixels)} images but {labels_path} has {len(labels)} labels")
    images = (pixels.astype(DTYPE) / DTYPE(255.0))[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), provenance or Path(images_path).name,
                   max(10, int(labels.max()) + 1 if len(labels) else 10))


def write_idx_images(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I3I", IMAGE_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_mnist(root):
    """Return the list of MNIST files under ``root`` whose hash is wrong or missing."""
    bad = []
    for name, digest in MNIST_SHA256.items():
        path = Path(root) / name
        if not path.exists() or sha256_file(path) != digest:
            bad.append(name)
    return bad


def fetch_mnist(root, mirror=DEFAULT_MIRROR, force=False):
    """Download the four MNIST files (gzip) from ``mirror`` into ``root``.

    Every file is checked against the published SHA-256 before it is moved
    into place; a mismatch leaves nothing behind.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, digest in MNIST_SHA256.items():
        target = root / name
        if target.exists() and not force and sha256_file(target) == digest:
            continue
        url = mirror.rstrip("/") + "/" + name + ".gz"
        log.info("fetching %s", url)
        with tempfile.NamedTemporaryFile(dir=root, delete=False) as tmp:
            with urllib.request.urlopen(url) as resp, gzip.GzipFile(fileobj=resp) as gz:
                shutil.copyfileobj(gz, tmp)
        if sha256_file(tmp.name) != digest:
            os.unlink(tmp.name)
            raise FormatError(f"{url}: SHA-256 mismatch, refusing to use it")
        os.replace(tmp.name, target)
    return root


def load_mnist(root, split="train"):
    root = Path(root)
    images = root / MNIST_FILES[f"{split}_images"]
    labels = root / MNIST_FILES[f"{split}_labels"]
    return load_idx(images, labels, provenance=f"mnist-{split}")


def mnist_subset(root, n_train=10000, val_size=None, n_test=None, seed=0, classes=None):
    """Desk-scale MNIST: a random ``n_train`` subset of the training file.

    ``val_size`` images are held out from that subset (default: the 5K/60K
    proportion).  Returns ``(train, val, test)``.
    """
    full = load_mnist(root, "train")
    test = load_mnist(root, "test")
    rng = np.random.default_rng(seed)
    pool = np.arange(len(full))
    if classes is not None:
        pool = pool[np.isin(full.labels, classes)]
        test = test.subset(np.flatnonzero(np.isin(test.labels, classes)), f"mnist-test{list(classes)}")
    if n_train > len(pool):
        raise InputError(f"asked for {n_train} training images, only {len(pool)} available")
    chosen = np.sort(rng.choice(pool, size=n_train, replace=False))
    if val_size is None:
        val_size = int(round(n_train * 5000 / 60000))
    perm = rng.permutation(chosen)
    val_idx, train_idx = np.sort(perm[:val_size]), np.sort(perm[val_size:])
    if n_test is not None and n_test < len(test):
        test = test.subset(np.sort(rng.choice(len(test), size=n_test, replace=False)), "mnist-test")
    return (full.subset(train_idx, "mnist-train"), full.subset(val_idx, "mnist-val"), test)


# -- partitioning / augmentation ----------------------------------------------

def partition(dataset_or_n, k, seed=0):
    """Seeded shuffle then round-robin split into ``k`` disjoint parts."""
    n = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else len(dataset_or_n)
    if k < 1 or k > n:
        raise InputError(f"cannot split {n} samples into {k} parts")
    order = np.random.default_rng(seed).permutation(n)
    return PartitionPlan(seed, k, [np.sort(order[i::k]) for i in range(k)])


def augment_shift(dataset, max_shift=2, seed=0):
    """Translate each image by a random integer offset, zero-filling borders."""
    if max_shift == 0:
        return Dataset(dataset.images.copy(), dataset.labels.copy(), dataset.provenance, dataset.class_count)
    images = shift_batch(dataset.images, max_shift, np.random.default_rng(seed))
    return Dataset(images, dataset.labels.copy(), f"{dataset.provenance}+shift{max_shift}", dataset.class_count)


def shift_batch(images, max_shift, rng):
    """Shift every image of ``images[N, C, H, W]`` by its own random offset."""
    h = images.shape[-2]
    if not 0 <= max_shift < h / 2:
        raise InputError(f"max_shift must lie in [0, {h / 2}), got {max_shift}")
    offsets = rng.integers(-max_shift, max_shift + 1, size=(len(images), 2))
    out = np.zeros_like(images)
    # group by offset so each distinct shift is one slice assignment
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            sel = np.flatnonzero((offsets[:, 0] == dy) & (offsets[:, 1] == dx))
            if sel.size:
                out[sel] = shift_image(images[sel], dy, dx)
    return out


def shift_image(image, dy, dx):
    """Move content ``dy`` rows down and ``dx`` columns right (negative = up/left)."""
    out = np.zeros_like(image)
    h, w = image.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = image[..., ys, xs]
    return out


def synthetic_blobs(class_count=3, per_class=50, dim=2, separation=10.0, seed=0):
    """Isotropic unit-variance Gaussian clusters with means ``separation`` apart.

    Class means sit on scaled axis directions (a simplex when ``dim`` is
    smaller than ``class_count``), so the pairwise distance is ``separation``.
    """
    if per_class <= 0 or class_count <= 0:
        raise InputError("synthetic_blobs needs at least one sample per class")
    if separation <= 0:
        raise InputError(f"separation must be positive, got {separation}")
    rng = np.random.default_rng(seed)
    if dim >= class_count:
        means = np.eye(class_count, dim)
    else:
        angles = 2 * math.pi * np.arange(class_count) / class_count
        means = np.zeros((class_count, dim))
        means[:, 0], means[:, min(1, dim - 1)] = np.cos(angles), np.sin(angles)
    pair = np.linalg.norm(means[0] - means[1]) if class_count > 1 else 1.0
    means = means * (separation / pair)
    x = np.concatenate([rng.normal(means[c], 1.0, size=(per_class, dim)) for c in range(class_count)])
    y = np.repeat(np.arange(class_count), per_class)
    order = rng.permutation(len(y))
    return Dataset(x[order].astype(DTYPE), y[order], f"blobs(seed={seed})", class_count)
