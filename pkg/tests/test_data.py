import numpy as np
import pytest

from copanet import data as data_mod
from copanet import engine, training
from copanet.engine import Tensor
from copanet.errors import ConfigurationError, DataError


def _write_batch(path, rng):
    """Synthesize one well-formed CIFAR-10 binary batch; returns the records."""
    labels = rng.integers(0, 10, size=10000, dtype=np.uint8)
    pixels = rng.integers(0, 256, size=(10000, 3072), dtype=np.uint8)
    records = np.concatenate([labels[:, None], pixels], axis=1)
    path.write_bytes(records.tobytes())
    return labels, pixels


def test_read_batch_round_trips_bytes(tmp_path, rng):
    path = tmp_path / "data_batch_1.bin"
    labels, pixels = _write_batch(path, rng)
    images, parsed_labels = data_mod.read_batch_file(str(path))
    assert images.shape == (10000, 3, 32, 32)
    assert np.array_equal(parsed_labels, labels.astype(np.int64))
    assert np.array_equal(images[0].reshape(-1), pixels[0])
    assert np.array_equal(images.reshape(10000, -1), pixels)


def test_truncated_batch_reports_byte_counts(tmp_path, rng):
    path = tmp_path / "data_batch_1.bin"
    _write_batch(path, rng)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(DataError) as err:
        data_mod.read_batch_file(str(path))
    assert str(10000 * 3073) in str(err.value)
    assert str(10000 * 3073 - 100) in str(err.value)


def test_bad_label_rejected(tmp_path, rng):
    path = tmp_path / "data_batch_1.bin"
    labels, pixels = _write_batch(path, rng)
    records = np.concatenate([labels[:, None], pixels], axis=1)
    records[17, 0] = 11
    path.write_bytes(records.tobytes())
    with pytest.raises(DataError):
        data_mod.read_batch_file(str(path))


def test_load_cifar10_split_sizes(tmp_path, rng):
    for i in range(1, 6):
        _write_batch(tmp_path / f"data_batch_{i}.bin", rng)
    _write_batch(tmp_path / "test_batch.bin", rng)
    train, test = data_mod.load_cifar10(str(tmp_path))
    assert len(train) == 50000 and train.split == "train"
    assert len(test) == 10000 and test.split == "test"
    assert train.class_names == data_mod.CIFAR10_CLASSES


def test_load_cifar10_missing_file(tmp_path):
    with pytest.raises(DataError):
        data_mod.load_cifar10(str(tmp_path))


class _ForcedRng:
    """Deterministic stand-in driving augment's random draws."""

    def __init__(self, offsets, flip):
        self.offsets = np.asarray(offsets)
        self.flip = flip

    def integers(self, low, high, size=None):
        return self.offsets

    def random(self):
        return 0.0 if self.flip else 1.0


def test_augment_identity_offsets_no_flip(rng):
    img = rng.standard_normal((3, 32, 32))
    out = data_mod.augment(img, _ForcedRng((4, 4), flip=False))
    assert np.array_equal(out, img)


def test_augment_flip_reverses_columns_and_is_involution(rng):
    img = rng.standard_normal((3, 32, 32))
    flipped = data_mod.augment(img, _ForcedRng((4, 4), flip=True))
    assert np.array_equal(flipped, img[:, :, ::-1])
    assert np.array_equal(data_mod.augment(flipped, _ForcedRng((4, 4), flip=True)), img)


def test_augment_corner_crop_index_arithmetic(rng):
    # offset (8, 8) with pad 4: crop[i, j] = original[i + 4, j + 4] while it
    # exists, zeros where the window hangs over the padding
    img = rng.standard_normal((3, 32, 32))
    out = data_mod.augment(img, _ForcedRng((8, 8), flip=False))
    assert np.array_equal(out[:, :28, :28], img[:, 4:, 4:])
    assert not out[:, 28:, :].any()
    assert not out[:, :, 28:].any()


def test_augment_preserves_shape_and_dtype(rng):
    img = rng.standard_normal((3, 32, 32)).astype(np.float32)
    out = data_mod.augment(img, np.random.default_rng(3))
    assert out.shape == img.shape and out.dtype == img.dtype


def test_augment_mean_shift_bounded_by_padded_fraction(rng):
    # dropping at most the pixels outside the crop window bounds the
    # per-channel mean change by dropped_fraction * max|pixel|
    for trial in range(20):
        img = rng.standard_normal((3, 32, 32))
        out = data_mod.augment(img, np.random.default_rng(trial))
        zero_frac = (out == 0).mean(axis=(1, 2))
        bound = (zero_frac + 1e-12) * np.abs(img).max()
        shift = np.abs(out.mean(axis=(1, 2)) - img.mean(axis=(1, 2)))
        assert (shift <= bound + 1e-9).all()


def test_normalizer_round_trip(f64, rng):
    images = rng.integers(0, 256, size=(50, 3, 32, 32), dtype=np.uint8)
    norm = data_mod.Normalizer.fit(images)
    x = norm.normalize(images)
    assert abs(x.mean()) < 1e-10
    back = norm.denormalize(x)
    assert np.abs(back - images).max() < 1e-6


def test_normalizer_scale255(f64):
    norm = data_mod.Normalizer.scale255()
    x = norm.normalize(np.full((1, 3, 2, 2), 255, dtype=np.uint8))
    assert np.array_equal(x, np.ones((1, 3, 2, 2)))


def test_normalizer_rejects_zero_std():
    with pytest.raises(ConfigurationError):
        data_mod.Normalizer(np.zeros(3), np.zeros(3))


def test_make_synthetic_deterministic():
    a = data_mod.make_synthetic(10, 20, seed=5)
    b = data_mod.make_synthetic(10, 20, seed=5)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    c = data_mod.make_synthetic(10, 20, seed=6)
    assert not np.array_equal(a.images, c.images)


def test_make_synthetic_sizes_and_dtype():
    ds = data_mod.make_synthetic(10, 100, seed=0)
    assert len(ds) == 1000
    assert ds.images.shape == (1000, 3, 32, 32) and ds.images.dtype == np.uint8
    assert np.array_equal(np.bincount(ds.labels), np.full(10, 100))


def test_make_synthetic_needs_two_classes():
    with pytest.raises(ConfigurationError):
        data_mod.make_synthetic(1, 10)


def test_batching_covers_epoch_exactly_once(rng):
    seen = np.concatenate(list(data_mod.iterate_batches(103, 16, rng=rng)))
    assert len(seen) == 103
    assert np.array_equal(np.sort(seen), np.arange(103))
    ordered = np.concatenate(list(data_mod.iterate_batches(10, 4)))
    assert np.array_equal(ordered, np.arange(10))


class _TwoLayerConvBaseline:
    """Two conv layers plus a dense readout over a pooled 4x4 grid (the dense
    layer is a 4x4 valid conv, i.e. a linear map on the flattened grid).
    Used as a learnability yardstick for the synthetic set."""

    def __init__(self, classes, rng):
        self.conv1 = Tensor(np.zeros((16, 3, 3, 3)), requires_grad=True)
        self.bn1 = engine.BatchNormState(16)
        self.conv2 = Tensor(np.zeros((32, 16, 3, 3)), requires_grad=True)
        self.bn2 = engine.BatchNormState(32)
        self.fc_w = Tensor(np.zeros((classes, 32, 4, 4)), requires_grad=True)
        training.he_init(self, rng)

    def parameters(self):
        return {"conv1.w": self.conv1, "bn1.gamma": self.bn1.gamma, "bn1.beta": self.bn1.beta,
                "conv2.w": self.conv2, "bn2.gamma": self.bn2.gamma, "bn2.beta": self.bn2.beta,
                "classifier.w": self.fc_w}

    def forward(self, x, training=False):
        h = engine.relu(engine.batchnorm2d(engine.conv2d(x, self.conv1, 1, 1), self.bn1, training))
        h = engine.avgpool2d(h, 2, 2)
        h = engine.relu(engine.batchnorm2d(engine.conv2d(h, self.conv2, 1, 1), self.bn2, training))
        h = engine.avgpool2d(h, 4, 4)
        return engine.global_avgpool(engine.conv2d(h, self.fc_w, 1, 0))


def test_synthetic_set_learnable_by_conv_baseline():
    prev = engine.precision()
    engine.set_precision(32)
    try:
        ds = data_mod.make_synthetic(10, 20, seed=7)
        norm = data_mod.Normalizer.fit(ds.images)
        rng = np.random.default_rng(7)
        net = _TwoLayerConvBaseline(10, rng)
        velocity = {n: np.zeros_like(p.data) for n, p in net.parameters().items()}
        for epoch in range(20):
            for idx in data_mod.iterate_batches(len(ds), 32, rng=rng):
                x = Tensor(norm.normalize(ds.images[idx]))
                logits = net.forward(x, training=True)
                loss = engine.softmax_cross_entropy(logits, ds.labels[idx])
                for p in net.parameters().values():
                    p.grad = None
                loss.backward()
                grads = {n: p.grad for n, p in net.parameters().items()}
                training.sgd_step(net.parameters(), grads, velocity, 0.05, 0.9, 1e-4)
        with engine.no_grad():
            logits = net.forward(Tensor(norm.normalize(ds.images)), training=False)
        acc = (logits.data.argmax(axis=1) == ds.labels).mean()
        assert acc > 0.9, f"baseline train accuracy {acc:.3f} <= 0.9"
    finally:
        engine.set_precision(prev)
