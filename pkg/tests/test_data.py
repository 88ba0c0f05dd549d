import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from growprune import data as D
from growprune.errors import FormatError, InputError
from growprune.network import build_model
from growprune.tensor import SgdConfig
from growprune.training import Trainer, evaluate


def write_idx_by_hand(path, magic, dims, payload):
    """Independent big-endian IDX writer used as the fixture oracle."""
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, (magic >> 8) & 0xFF, magic & 0xFF]))
        for d in dims:
            fh.write(d.to_bytes(4, "big"))
        fh.write(bytes(payload))


@pytest.fixture
def idx_pair(tmp_path):
    pixels = [0, 255, 128, 1, 7, 9, 200, 30, 64, 100, 0, 17, 3, 250, 5, 99, 11, 12]
    write_idx_by_hand(tmp_path / "img", 0x0803, [2, 3, 3], pixels)
    write_idx_by_hand(tmp_path / "lab", 0x0801, [2], [7, 3])
    return tmp_path / "img", tmp_path / "lab", pixels


def test_idx_fixture_roundtrip(idx_pair):
    img, lab, pixels = idx_pair
    ds = D.load_idx(img, lab)
    assert ds.images.shape == (2, 1, 3, 3)
    assert ds.labels.tolist() == [7, 3]
    np.testing.assert_array_equal(ds.images.ravel(), np.array(pixels, np.float32) / np.float32(255.0))
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_idx_writer_matches_hand_bytes(tmp_path, idx_pair):
    img, lab, pixels = idx_pair
    D.write_idx_images(tmp_path / "img2", np.array(pixels, np.uint8).reshape(2, 3, 3))
    D.write_idx_labels(tmp_path / "lab2", np.array([7, 3], np.uint8))
    assert (tmp_path / "img2").read_bytes() == img.read_bytes()
    assert (tmp_path / "lab2").read_bytes() == lab.read_bytes()


def test_idx_truncated_names_offset(tmp_path, idx_pair):
    img, lab, _ = idx_pair
    raw = img.read_bytes()
    img.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="byte offset 29"):
        D.load_idx(img, lab)
    img.write_bytes(raw[:10])
    with pytest.raises(FormatError, match="byte 10"):
        D.load_idx(img, lab)


def test_idx_bad_magic(tmp_path, idx_pair):
    img, lab, _ = idx_pair
    with pytest.raises(FormatError, match="magic"):
        D.load_idx(lab, img)


def test_idx_count_mismatch(tmp_path, idx_pair):
    img, _, _ = idx_pair
    write_idx_by_hand(tmp_path / "lab3", 0x0801, [3], [1, 2, 3])
    with pytest.raises(FormatError):
        D.load_idx(img, tmp_path / "lab3")


def test_mnist_files_shape_and_digest(mnist_dir):
    train = D.load_mnist(mnist_dir, "train")
    assert train.images.shape == (60_000, 1, 28, 28)
    assert len(D.load_mnist(mnist_dir, "test")) == 10_000
    assert D.verify_mnist(mnist_dir) == []


def test_mnist_subset_sizes(mnist_dir):
    train, val, test = D.mnist_subset(mnist_dir, 10_000, seed=0)
    assert (len(train), len(val), len(test)) == (9167, 833, 10_000)
    again = D.mnist_subset(mnist_dir, 10_000, seed=0)[0]
    np.testing.assert_array_equal(train.labels, again.labels)


# -- partitioning ----------------------------------------------------------------

def test_partition_single():
    plan = D.partition(17, 1, seed=3)
    assert plan.parts[0].tolist() == list(range(17))


def test_partition_even_split_sizes():
    plan = D.partition(55_000, 10, seed=0)
    assert [len(p) for p in plan.parts] == [5500] * 10


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.integers(1, 30), st.integers(0, 10_000))
def test_partition_is_disjoint_cover(n, k, seed):
    if k > n:
        with pytest.raises(InputError):
            D.partition(n, k, seed)
        return
    plan = D.partition(n, k, seed)
    sets = [set(p.tolist()) for p in plan.parts]
    assert set().union(*sets) == set(range(n))
    assert sum(len(s) for s in sets) == n
    sizes = [len(s) for s in sets]
    assert max(sizes) - min(sizes) <= 1
    again = D.partition(n, k, seed)
    assert all((a == b).all() for a, b in zip(plan.parts, again.parts))


def test_partition_indices_union():
    plan = D.partition(20, 4, seed=1)
    assert plan.indices([]).size == 0
    np.testing.assert_array_equal(plan.indices([0, 2]), np.sort(np.concatenate([plan.parts[0], plan.parts[2]])))


# -- shift augmentation -------------------------------------------------------------

def test_shift_zero_is_identity(rng):
    ds = D.Dataset(rng.random((4, 1, 6, 6)).astype(np.float32), np.arange(4))
    out = D.augment_shift(ds, 0, seed=1)
    np.testing.assert_array_equal(out.images, ds.images)


def test_shift_moves_pixel_one_column():
    img = np.zeros((1, 5, 5), np.float32)
    img[0, 2, 2] = 1.0
    moved = D.shift_image(img, 0, 1)
    assert moved[0, 2, 3] == 1.0 and moved.sum() == 1.0
    assert D.shift_image(img, -1, 0)[0, 1, 2] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3))
def test_shift_never_creates_mass(seed, max_shift):
    r = np.random.default_rng(seed)
    ds = D.Dataset(r.random((6, 1, 8, 8)).astype(np.float32), r.integers(0, 10, 6))
    out = D.augment_shift(ds, max_shift, seed)
    assert (out.images.reshape(6, -1).sum(axis=1) <= ds.images.reshape(6, -1).sum(axis=1) + 1e-5).all()
    np.testing.assert_array_equal(out.labels, ds.labels)


def test_shift_limit():
    ds = D.Dataset(np.zeros((1, 1, 4, 4), np.float32), [0])
    with pytest.raises(InputError):
        D.augment_shift(ds, 2)


# -- synthetic blobs ----------------------------------------------------------------

def test_blobs_deterministic():
    a = D.synthetic_blobs(3, 10, 2, 5.0, seed=7)
    b = D.synthetic_blobs(3, 10, 2, 5.0, seed=7)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_blobs_empty_is_error():
    with pytest.raises(InputError):
        D.synthetic_blobs(3, 0)
    with pytest.raises(InputError):
        D.synthetic_blobs(3, 5, separation=0)


def test_blobs_separable_by_small_mlp():
    ds = D.synthetic_blobs(class_count=3, per_class=40, dim=2, separation=10.0, seed=0)
    model = build_model("mlp", seed=0, widths=[2, 10, 3])
    trainer = Trainer(SgdConfig(0.02, 0.9, 0.0), batch_size=16, seed=0)
    for _ in range(50):
        trainer.train_epoch(model, ds)
    assert evaluate(model, ds) == 0.0


def test_dataset_validation():
    with pytest.raises(InputError):
        D.Dataset(np.zeros((2, 3)), [0])
    with pytest.raises(InputError):
        D.Dataset(np.zeros((1, 3)), [10], class_count=10)
