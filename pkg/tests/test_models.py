import math

import numpy as np
import pytest
from sklearn.base import clone

from dpd import autodiff as ad
from dpd.autodiff import ParamTree, Tensor
from dpd.diffusion import build_schedule
from dpd.models import (
    ClassifierConfig,
    DenoiserConfig,
    MLPImageClassifier,
    classifier_forward,
    classifier_logits,
    denoiser_forward,
    init_classifier,
    init_denoiser,
    time_embedding,
    train_classifier,
)

SCHED = build_schedule()


def test_denoiser_zero_last_layer_outputs_zero():
    cfg = DenoiserConfig()
    theta = init_denoiser(cfg, seed=0, zero_last=True)
    rng = np.random.default_rng(0)
    out = denoiser_forward(theta, rng.standard_normal((5, 64)), rng.integers(1, 201, 5), rng.standard_normal((5, 32)), SCHED)
    np.testing.assert_array_equal(out.data, np.zeros((5, 64)))


@pytest.mark.parametrize("d,m,hidden", [(64, 32, (256, 256)), (16, 8, (32,)), (10, 5, (7, 9, 11))])
def test_denoiser_shape_contract(d, m, hidden):
    cfg = DenoiserConfig(latent_dim=d, text_embed_dim=m, hidden=hidden)
    theta = init_denoiser(cfg, seed=1)
    assert theta["layer0.weight"].shape == (cfg.input_dim, hidden[0])
    rng = np.random.default_rng(1)
    out = denoiser_forward(theta, rng.standard_normal((3, d)), 7, rng.standard_normal(m), SCHED)
    assert out.shape == (3, d)


def test_denoiser_dimension_mismatch():
    theta = init_denoiser(DenoiserConfig(), seed=0)
    with pytest.raises(ValueError, match="mismatch"):
        denoiser_forward(theta, np.zeros((2, 64)), 5, np.zeros((3, 32)), SCHED)
    with pytest.raises(ValueError):
        denoiser_forward(theta, np.zeros((2, 64)), 0, np.zeros(32), SCHED)


def test_time_embedding_shape_and_range():
    e = time_embedding(np.arange(1, 201), 200, 32)
    assert e.shape == (200, 32)
    assert np.abs(e).max() <= 1.0
    assert len({row.tobytes() for row in e}) == 200


def test_classifier_probabilities_valid():
    phi = init_classifier(ClassifierConfig(), seed=0)
    p = classifier_forward(phi, np.random.default_rng(0).uniform(size=(7, 16, 16)))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_zero_classifier_is_uniform_and_ce_is_log_c():
    phi = init_classifier(ClassifierConfig(n_classes=4), zero=True)
    x = np.random.default_rng(1).uniform(size=(3, 256))
    np.testing.assert_allclose(classifier_forward(phi, x), 0.25, atol=1e-15)
    ce = ad.softmax_cross_entropy(classifier_logits(phi, x), np.array([0, 1, 2]))
    assert ce.data.item() == pytest.approx(-math.log(1 / 4), abs=1e-12)


def test_classifier_dimension_mismatch():
    phi = init_classifier(ClassifierConfig(), seed=0)
    with pytest.raises(ValueError, match="256"):
        classifier_forward(phi, np.zeros((2, 8, 8)))


def test_denoiser_gradients():
    cfg = DenoiserConfig(hidden=(32, 32))
    theta = init_denoiser(cfg, seed=2)
    rng = np.random.default_rng(2)
    z, t, e, eps = rng.standard_normal((6, 64)), rng.integers(1, 201, 6), rng.standard_normal((6, 32)), rng.standard_normal((6, 64))

    def loss(p):
        return ad.sum_of_squares(ad.sub(denoiser_forward(p, z, t, e, SCHED), Tensor(eps)))

    assert ad.check_gradients(loss, theta, 60) < 1e-4


def test_classifier_gradients_wrt_params_and_pixels():
    phi = init_classifier(ClassifierConfig(), seed=3)
    rng = np.random.default_rng(3)
    x, y = rng.uniform(size=(5, 256)), rng.integers(0, 4, 5)
    assert ad.check_gradients(lambda p: ad.softmax_cross_entropy(classifier_logits(p, x), y), phi, 60) < 1e-4
    # pixels as the differentiated input, with phi frozen
    px = ParamTree({"x": x})
    assert ad.check_gradients(lambda p: ad.softmax_cross_entropy(classifier_logits(phi, p["x"]), y), px, 60) < 1e-4


def _blobs(seed, n=120):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    X = np.clip(0.5 + 0.1 * rng.standard_normal((n, 16, 16)), 0, 1)
    for c in range(3):
        X[y == c, c * 5 : c * 5 + 5, :] += 0.3
    return np.clip(X, 0, 1), y


def test_train_classifier_deterministic_and_learns():
    X, y = _blobs(0)
    cfg = ClassifierConfig(n_classes=3)
    a = train_classifier(X, y, cfg, epochs=5, lr=1e-3, seed=5)
    b = train_classifier(X, y, cfg, epochs=5, lr=1e-3, seed=5)
    assert a.digest() == b.digest()
    assert (classifier_forward(a, X).argmax(1) == y).mean() > 0.9


def test_training_loss_trend_non_increasing():
    cfg = ClassifierConfig(n_classes=3)
    slopes = []
    for seed in range(5):
        X, y = _blobs(seed)
        _, hist = train_classifier(X, y, cfg, epochs=10, seed=seed, return_history=True)
        assert len(hist) == 10
        slopes.append(np.polyfit(np.arange(10), hist, 1)[0])
    assert np.median(slopes) < 0


def test_train_classifier_errors():
    cfg = ClassifierConfig(n_classes=3)
    with pytest.raises(ValueError, match="empty"):
        train_classifier(np.zeros((0, 256)), np.zeros(0, dtype=int), cfg)
    with pytest.raises(ValueError, match="labels"):
        train_classifier(np.zeros((2, 256)), np.array([0, 3]), cfg)


def test_train_classifier_exact_step_count():
    X, y = _blobs(1, n=40)
    _, hist = train_classifier(X, y, ClassifierConfig(n_classes=3), steps=7, batch=32, seed=0, return_history=True)
    # 2 minibatches per pass -> passes of 2, 2, 2, 1 steps
    assert len(hist) == 4


def test_sklearn_estimator_api():
    X, y = _blobs(2)
    clf = MLPImageClassifier(n_classes=3, epochs=10, random_state=1).fit(X, y)
    assert clf.predict(X).shape == (len(X),)
    assert clf.predict_proba(X.reshape(len(X), -1)).shape == (len(X), 3)
    assert clf.score(X.reshape(len(X), -1), y) > 0.9
    params = clf.get_params()
    assert params["hidden_layer_sizes"] == (128,)
    clone(clf)
    wrapped = MLPImageClassifier.from_params(clf.params_)
    np.testing.assert_array_equal(wrapped.predict(X), clf.predict(X))
