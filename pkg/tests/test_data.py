import csv

import numpy as np
import pytest

from pclkd.data import (CIFAR_RECORD_BYTES, Dataset, augment, augment_batch, epoch_order, iterate_batches,
                        load_cifar10, make_synthetic, make_views, normalize_pair, num_batches)


def test_flip_is_involution(rng):
    img = rng.normal(size=(3, 8, 8))
    once = augment(img, None, flip=True, offset=(4, 4))
    np.testing.assert_array_equal(once, img[:, :, ::-1])
    np.testing.assert_array_equal(augment(once, None, flip=True, offset=(4, 4)), img)


def test_center_offset_is_identity(rng):
    img = rng.normal(size=(3, 8, 8))
    np.testing.assert_array_equal(augment(img, None, flip=False, offset=(4, 4)), img)


def test_crop_shifts_with_zero_fill():
    img = np.arange(16.0).reshape(1, 4, 4) + 1
    out = augment(img, None, flip=False, offset=(5, 4))  # one row down
    np.testing.assert_array_equal(out[0, :3], img[0, 1:])
    np.testing.assert_array_equal(out[0, 3], 0.0)


def test_eval_mode_identity(rng):
    img = rng.normal(size=(3, 8, 8))
    assert augment(img, None) is img


def test_augmentation_deterministic_under_seed(rng):
    x = rng.normal(size=(5, 3, 8, 8))
    a = augment_batch(x, np.random.default_rng(9))
    b = augment_batch(x, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_views_identical_without_augmentation(rng):
    x = rng.normal(size=(4, 3, 8, 8))
    batch = make_views(x, np.zeros(4), 3, None)
    assert len(batch.views) == 3
    for v in batch.views[1:]:
        np.testing.assert_array_equal(v, batch.views[0])


def test_views_differ_under_rng(rng):
    x = rng.normal(size=(100, 3, 8, 8))
    batch = make_views(x, np.zeros(100), 3, np.random.default_rng(0))
    assert len(batch.views) == 3
    assert any(not np.array_equal(batch.views[0][i], batch.views[1][i]) for i in range(100))


def test_vector_jitter_views(rng):
    x = rng.normal(size=(10, 2))
    same = make_views(x, np.zeros(10), 2, np.random.default_rng(0), jitter=0.0)
    np.testing.assert_array_equal(same.views[0], same.views[1])
    diff = make_views(x, np.zeros(10), 2, np.random.default_rng(0), jitter=0.1)
    assert not np.array_equal(diff.views[0], diff.views[1])


# -- batching ----------------------------------------------------------------------

def test_every_sample_once_short_batch_kept():
    batches = list(iterate_batches(103, 25, seed=1, epoch=0))
    assert [len(b) for b in batches] == [25, 25, 25, 25, 3]
    assert num_batches(103, 25) == 5
    assert sorted(np.concatenate(batches).tolist()) == list(range(103))


def test_batch_order_seeded_and_reshuffled():
    assert np.array_equal(epoch_order(50, 3, 2), epoch_order(50, 3, 2))
    assert not np.array_equal(epoch_order(50, 3, 2), epoch_order(50, 3, 3))
    assert not np.array_equal(epoch_order(50, 3, 2), epoch_order(50, 4, 2))


# -- synthetic -----------------------------------------------------------------------

def test_synthetic_size_and_determinism():
    a = make_synthetic(5, 100, 3, 0.2)
    b = make_synthetic(5, 100, 3, 0.2)
    assert len(a) == 300 and a.num_classes == 3
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    assert np.bincount(a.y).tolist() == [100, 100, 100]


def test_noiseless_spiral_separable_in_polar_coordinates():
    ds = make_synthetic(0, 200, 3, noise=0.0)
    r = np.hypot(ds.x[:, 0], ds.x[:, 1])
    theta = np.arctan2(ds.x[:, 1], ds.x[:, 0])
    # unwinding the spiral recovers the arm index exactly
    arm = np.round(((theta / (2 * np.pi) - r) * 3) % 3).astype(int) % 3
    np.testing.assert_array_equal(arm, ds.y)


def test_synthetic_needs_two_classes():
    with pytest.raises(ValueError):
        make_synthetic(0, 10, 1)


def test_normalisation_uses_train_stats(rng):
    train = Dataset(rng.normal(3.0, 2.0, size=(200, 2)), rng.integers(0, 2, 200), 2)
    test = Dataset(rng.normal(3.0, 2.0, size=(50, 2)), rng.integers(0, 2, 50), 2)
    ntr, nte = normalize_pair(train, test)
    np.testing.assert_allclose(ntr.x.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(ntr.x.std(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(nte.x, (test.x - train.x.mean(0)) / train.x.std(0), rtol=1e-13)
    again = normalize_pair(train, test)[1]
    np.testing.assert_array_equal(again.x, nte.x)


def test_csv_dump(tmp_path):
    ds = make_synthetic(1, 4, 3)
    ds.to_csv(tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["x0", "x1", "label"]
    assert len(rows) == 13
    np.testing.assert_array_equal(np.array(rows[1:], dtype=float)[:, :2], ds.x)


def test_dataset_label_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 3], 3)


# -- CIFAR-10 binary reader ---------------------------------------------------------------

@pytest.fixture(scope="module")
def cifar_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cifar")
    gen = np.random.default_rng(0)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        rec = gen.integers(0, 256, size=(10000, CIFAR_RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = gen.integers(0, 10, size=10000)
        rec.tofile(root / name)
    return root


def test_cifar_full_load(cifar_dir):
    train, test = load_cifar10(cifar_dir)
    assert (len(train), len(test), train.num_classes) == (50000, 10000, 10)
    assert train.x.shape == (50000, 3, 32, 32)
    raw = np.fromfile(cifar_dir / "data_batch_1.bin", dtype=np.uint8, count=CIFAR_RECORD_BYTES)
    assert 0 <= raw[0] <= 9 and train.y[0] == raw[0]
    # channel-planar layout: first 1024 pixel bytes are the red plane
    np.testing.assert_allclose(train.x[0, 0].ravel(), raw[1:1025] / 255.0)
    np.testing.assert_allclose(train.x[0, 2].ravel(), raw[2049:3073] / 255.0)


def test_cifar_subset(cifar_dir):
    train, _ = load_cifar10(cifar_dir, subset=500)
    assert len(train) == 5000
    assert np.bincount(train.y, minlength=10).tolist() == [500] * 10


def test_cifar_truncated_file(tmp_path, cifar_dir):
    for p in cifar_dir.iterdir():
        (tmp_path / p.name).write_bytes(p.read_bytes())
    with open(tmp_path / "data_batch_3.bin", "r+b") as fh:
        fh.truncate(1000)
    with pytest.raises(IOError, match=r"data_batch_3\.bin.*30730000"):
        load_cifar10(tmp_path)


def test_cifar_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="data_batch_1.bin"):
        load_cifar10(tmp_path)


def test_noiseless_spiral_fits_with_two_layer_mlp():
    from pclkd.losses import cross_entropy
    from pclkd.nn import SGD, Linear, ReLU, Sequential
    from pclkd.tensor import Tensor, no_grad

    ds, _ = normalize_pair(*(2 * [make_synthetic(0, 100, 3, noise=0.0)]))
    gen = np.random.default_rng(0)
    net = Sequential([Linear(2, 128, rng=gen), ReLU(), Linear(128, 3, rng=gen)])
    opt = SGD(net.param_store(), lr=0.1, weight_decay=0.0, milestones=())
    acc = 0.0
    for epoch in range(200):
        for idx in iterate_batches(len(ds), 32, 0, epoch):
            opt.zero_grad()
            cross_entropy(net(Tensor(ds.x[idx])), ds.y[idx]).backward()
            opt.step(epoch)
        with no_grad():
            acc = float(np.mean(net(Tensor(ds.x)).data.argmax(1) == ds.y))
        if acc == 1.0:
            break
    assert acc == 1.0
