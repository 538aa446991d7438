import numpy as np
import pytest

from petra import data as D


@pytest.fixture(scope="module")
def cifar_dir(tmp_path_factory):
    """Synthetic files in the CIFAR-10 binary layout (full size)."""
    root = tmp_path_factory.mktemp("cifar") / "cifar-10-batches-bin"
    root.mkdir()
    rng = np.random.default_rng(0)
    for name in D.CIFAR_TRAIN_FILES + [D.CIFAR_TEST_FILE]:
        rec = rng.integers(0, 256, (10000, D.CIFAR_RECORD), dtype=np.uint8)
        rec[:, 0] = np.arange(10000) % 10
        rec.tofile(root / name)
    return root


def test_cifar_counts_and_record_layout(cifar_dir):
    train, test = D.load_cifar10(cifar_dir.parent)
    assert (len(train), len(test)) == (50000, 10000)
    assert train.shape == (3, 32, 32)
    raw = np.fromfile(cifar_dir / "data_batch_1.bin", dtype=np.uint8, count=D.CIFAR_RECORD)
    assert train.labels[0] == raw[0] and 0 <= raw[0] <= 9
    np.testing.assert_array_equal(train.images[0, 0, 0, :4], raw[1:5] / np.float32(255))
    np.testing.assert_array_equal(train.images[0, 1, 0, 0], raw[1 + 1024] / np.float32(255))
    assert train.images.dtype == np.float32 and train.images.max() <= 1.0


def test_cifar_reload_is_bitwise_identical(cifar_dir):
    a, _ = D.load_cifar10(cifar_dir)
    b, _ = D.load_cifar10(cifar_dir)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_cifar_truncated_file_names_file_and_size(tmp_path, cifar_dir):
    for f in cifar_dir.iterdir():
        (tmp_path / f.name).write_bytes(f.read_bytes())
    bad = tmp_path / "data_batch_3.bin"
    bad.write_bytes(bad.read_bytes()[:1000])
    with pytest.raises(D.DataError, match=r"data_batch_3\.bin.*30730000"):
        D.load_cifar10(tmp_path)
    bad.unlink()
    with pytest.raises(D.DataError, match="data_batch_3.bin"):
        D.load_cifar10(tmp_path)


def test_find_cifar10_uses_env(monkeypatch, cifar_dir, tmp_path):
    monkeypatch.setenv("PETRA_DATA_DIR", str(cifar_dir.parent))
    assert D.find_cifar10() == cifar_dir
    monkeypatch.setenv("PETRA_DATA_DIR", str(tmp_path))
    assert D.find_cifar10() is None


def test_normalised_train_set_is_standardised(cifar_dir):
    train, _ = D.load_cifar10(cifar_dir)
    x = D.normalize(train.images[:20000], train.mean, train.std)
    assert np.all(np.abs(x.mean(axis=(0, 2, 3))) < 0.05)
    assert np.all(np.abs(x.std(axis=(0, 2, 3)) - 1) < 0.05)


def test_batches_per_epoch():
    assert D.num_batches(50000, 64) == 781
    assert D.num_batches(50000, 64, drop_last=False) == 782
    ds = D.synth_dataset(10, 1000, (3, 4, 4), np.random.default_rng(0))
    assert len(list(D.batches(ds, 64))) == 15


def test_random_crop_keeps_shape(rng):
    x = rng.standard_normal((5, 3, 32, 32)).astype(np.float32)
    y = D.random_crop(x, 4, rng)
    assert y.shape == (5, 3, 32, 32)
    # every crop is a shifted window of the zero-padded image
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
    for i in range(5):
        assert any(np.array_equal(y[i], padded[i, :, a:a + 32, b:b + 32]) for a in range(9) for b in range(9))


def test_hflip_is_a_mirror_or_identity(rng):
    x = rng.standard_normal((8, 1, 2, 3))
    y = D.random_hflip(x, rng)
    for a, b in zip(x, y):
        assert np.array_equal(a, b) or np.array_equal(a[..., ::-1], b)


def test_no_augmentation_is_reproducible_across_epochs():
    ds = D.synth_dataset(4, 200, (3, 8, 8), np.random.default_rng(1))
    ep1 = list(D.batches(ds, 32, D.NO_AUGMENT, np.random.default_rng(7)))
    ep2 = list(D.batches(ds, 32, D.NO_AUGMENT, np.random.default_rng(7)))
    for (x1, y1), (x2, y2) in zip(ep1, ep2):
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(y1, y2)


def test_test_split_is_never_augmented():
    _, test = D.synth_split(4, 100, 100, (3, 8, 8), np.random.default_rng(2))
    aug = list(D.batches(test, 25, D.AugmentConfig(), np.random.default_rng(3), shuffle=False))
    plain = list(D.batches(test, 25, D.NO_AUGMENT, np.random.default_rng(3), shuffle=False))
    for (a, _), (b, _) in zip(aug, plain):
        np.testing.assert_array_equal(a, b)


def test_synthetic_determinism_and_balance():
    a = D.synth_dataset(7, 100, (3, 4, 4), np.random.default_rng(3))
    b = D.synth_dataset(7, 100, (3, 4, 4), np.random.default_rng(3))
    np.testing.assert_array_equal(a.images, b.images)
    counts = np.bincount(a.labels, minlength=7)
    assert counts.max() - counts.min() <= 1


def test_synthetic_needs_one_example_per_class():
    with pytest.raises(ValueError):
        D.synth_dataset(10, 5)


def test_synthetic_is_linearly_separable():
    rng = np.random.default_rng(4)
    train, test = D.synth_split(2, 1000, 1000, (3, 8, 8), rng, separation=2.0)
    mu = train.class_means.reshape(2, -1)
    assert D.gaussian_bayes_error(mu[0], mu[1], train.sigma) < 0.05
    # Bayes-optimal linear rule from the known means
    x = test.images.reshape(len(test), -1).astype(np.float64)
    pred = np.argmin(((x[:, None, :] - mu[None]) ** 2).sum(-1), axis=1)
    assert (pred == test.labels).mean() >= 0.95
    # least-squares linear classifier fitted on the train split
    xt = np.c_[train.images.reshape(len(train), -1), np.ones(len(train))]
    w, *_ = np.linalg.lstsq(xt, 2.0 * train.labels - 1, rcond=None)
    pred = (np.c_[x, np.ones(len(test))] @ w > 0).astype(int)
    assert (pred == test.labels).mean() >= 0.95


def test_subset_keeps_normalisation(rng):
    train, _ = D.synth_split(3, 90, 30, (3, 4, 4), rng)
    sub = D.subset(train, 10, rng)
    assert len(sub) == 10
    np.testing.assert_array_equal(sub.mean, train.mean)
    with pytest.raises(ValueError):
        D.subset(train, 1000, rng)


def test_label_range_validated():
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 1, 1, 1)), np.array([0, 5]), classes=3)
