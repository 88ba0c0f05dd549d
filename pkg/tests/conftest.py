import os
from pathlib import Path

import numpy as np
import pytest

from growprune.data import MNIST_SHA256, synthetic_blobs

MNIST_CANDIDATES = [os.environ.get("GROWPRUNE_MNIST"), "/root/data/mnist", "data/mnist"]


def mnist_root():
    for cand in MNIST_CANDIDATES:
        if cand and all((Path(cand) / name).exists() for name in MNIST_SHA256):
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    root = mnist_root()
    if root is None:
        pytest.skip("MNIST IDX files not found (set GROWPRUNE_MNIST)")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    """Three well separated 2-d clusters split into train / val."""
    ds = synthetic_blobs(class_count=3, per_class=60, dim=2, separation=8.0, seed=3)
    return ds.subset(np.arange(120)), ds.subset(np.arange(120, 180))


def central_difference(f, x, step=1e-3):
    """d f / d x by central differences, evaluated in float64."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b):
    """Largest absolute deviation scaled by the larger of the two max-norms."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def write_fake_mnist(root, n_train=600, n_test=200, seed=0):
    """Tiny IDX set: each digit is a noisy bright bar at a class-specific place."""
    from growprune.data import write_idx_images, write_idx_labels

    r = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    def make(n):
        labels = r.integers(0, 10, size=n)
        images = (r.random((n, 28, 28)) * 40).astype(np.uint8)
        for k, c in enumerate(labels):
            row = 4 + 2 * int(c)
            images[k, row:row + 3, 6:22] = 220
        return images, labels

    for split, n in (("train", n_train), ("t10k", n_test)):
        images, labels = make(n)
        write_idx_images(root / f"{split}-images-idx3-ubyte", images)
        write_idx_labels(root / f"{split}-labels-idx1-ubyte", labels.astype(np.uint8))
    return root


@pytest.fixture(scope="session")
def fake_mnist(tmp_path_factory):
    return write_fake_mnist(tmp_path_factory.mktemp("fake_mnist"))


FAST_FLAGS = [
    "--n_train", "300", "--val_size", "60", "--n_test", "100", "--partition_count", "3",
    "--epochs_new_data", "1", "--epochs_all_data", "2", "--baseline_epochs", "3",
    "--recovery_epochs", "1", "--max_iterations", "4", "--beta", "10", "--growth_interval", "1",
    "--augment_shift", "0",
]


# acceptance verdicts, echoed again in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
