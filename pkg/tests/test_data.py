import numpy as np
import pytest

from dpd.codec import decode, encode
from dpd.data import CLASS_NAMES, ToyDatasetSpec, generate_toy_dataset
from dpd.models import ClassifierConfig, classifier_forward, train_classifier


@pytest.fixture(scope="module")
def ds():
    return generate_toy_dataset()


def test_counts_and_ranges(ds):
    assert ds.train.images.shape == (800, 16, 16)
    assert ds.test.images.shape == (400, 16, 16)
    assert np.bincount(ds.train.labels).tolist() == [200] * 4
    assert np.bincount(ds.test.labels).tolist() == [100] * 4
    assert ds.train.images.min() >= 0 and ds.train.images.max() <= 1
    assert set(ds.train.modes.tolist()) == {0, 1}
    assert ds.class_names == CLASS_NAMES


def test_deterministic_and_seed_sensitive():
    a = generate_toy_dataset(ToyDatasetSpec(train_per_class=5, test_per_class=2))
    b = generate_toy_dataset(ToyDatasetSpec(train_per_class=5, test_per_class=2))
    c = generate_toy_dataset(ToyDatasetSpec(train_per_class=5, test_per_class=2, seed=1))
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert a.train.images.tobytes() != c.train.images.tobytes()
    # train and test streams differ
    assert not np.array_equal(a.train.images[:2], a.test.images[:2])


def test_spec_validation():
    with pytest.raises(ValueError):
        ToyDatasetSpec(n_classes=9)
    with pytest.raises(ValueError):
        ToyDatasetSpec(noise=-1)
    with pytest.raises(ValueError):
        ToyDatasetSpec(train_per_class=0)


def test_nearest_centroid_is_better_than_80(ds):
    X = ds.train.images.reshape(800, -1)
    cents = np.stack([X[ds.train.labels == c].mean(0) for c in range(4)])
    Xt = ds.test.images.reshape(400, -1)
    pred = ((Xt[:, None] - cents[None]) ** 2).sum(-1).argmin(1)
    assert (pred == ds.test.labels).mean() > 0.8


def test_codec_reconstructions_keep_class_structure(ds):
    cfg = ClassifierConfig()
    phi = train_classifier(ds.train.images, ds.train.labels, cfg, epochs=20, lr=1e-3, seed=0)
    acc = (classifier_forward(phi, ds.test.images).argmax(1) == ds.test.labels).mean()
    recon = decode(encode(ds.test.images))
    acc_r = (classifier_forward(phi, recon).argmax(1) == ds.test.labels).mean()
    assert acc_r >= 0.9 * acc
