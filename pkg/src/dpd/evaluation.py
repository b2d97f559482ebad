"""Downstream protocol: train fresh classifiers on a (distilled) set, score on real test data."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import ClassifierConfig, classifier_forward, train_classifier
from .rng import substream

__all__ = [
    "EvalConfig",
    "EvalReport",
    "evaluate",
    "sample_std",
    "noise_baseline",
    "full_data_baseline",
    "aggregate_seeds",
    "SeedAggregate",
    "pooled_std",
]


@dataclass(frozen=True)
class EvalConfig:
    """Classifier trained per repeat. ``steps`` counts minibatch updates."""

    hidden: tuple = (128,)
    steps: int = 300
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    repeats: int = 10

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        object.__setattr__(self, "hidden", tuple(self.hidden))


def sample_std(values) -> float | None:
    """Unbiased (n - 1) standard deviation; ``None`` for fewer than two values."""
    x = np.asarray(values, dtype=np.float64)
    if len(x) < 2:
        return None
    mu = x.sum() / len(x)
    return math.sqrt(float(((x - mu) ** 2).sum()) / (len(x) - 1))


@dataclass
class EvalReport:
    name: str
    oa_mean: float
    oa_std: float | None
    oa_values: list  # one OA (percent) per repeat
    ipc: int | None
    n_classes: int
    n_train_real: int
    ratio: float | None
    config_hash: str = ""
    per_seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    images,
    labels,
    test_images,
    test_labels,
    cfg: EvalConfig | None = None,
    seed: int = 0,
    *,
    name: str = "",
    n_classes: int | None = None,
    ipc: int | None = None,
    n_train_real: int | None = None,
    config_hash: str = "",
) -> EvalReport:
    """Overall accuracy (percent) of classifiers trained on ``images`` only.

    Repeat ``r`` seeds its classifier from the ``("eval", r)`` substream of
    ``seed``. ``ratio`` is ``ipc * n_classes / n_train_real`` when both are known.
    """
    cfg = cfg or EvalConfig()
    X = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot evaluate an empty training set")
    Xt = np.asarray(test_images, dtype=np.float64)
    yt = np.asarray(test_labels, dtype=np.int64)
    C = n_classes if n_classes is not None else int(max(y.max(), yt.max())) + 1
    ccfg = ClassifierConfig(image_shape=X.shape[1:], hidden=cfg.hidden, n_classes=C)
    accs = []
    for r in range(cfg.repeats):
        s = int(substream(seed, "eval", r).integers(2**31))
        phi = train_classifier(X, y, ccfg, batch=cfg.batch, lr=cfg.lr, seed=s, weight_decay=cfg.weight_decay, steps=cfg.steps)
        pred = classifier_forward(phi, Xt).argmax(axis=1)
        accs.append(float((pred == yt).mean() * 100.0))
    ratio = ipc * C / n_train_real if (ipc is not None and n_train_real) else None
    return EvalReport(
        name=name,
        oa_mean=float(np.mean(accs)),
        oa_std=sample_std(accs),
        oa_values=accs,
        ipc=ipc,
        n_classes=C,
        n_train_real=int(n_train_real or 0),
        ratio=ratio,
        config_hash=config_hash,
    )


def noise_baseline(n_classes: int, ipc: int, image_shape, seed: int = 0):
    """``ipc`` uniform-noise images per class: the no-information floor."""
    rng = substream(seed, "noise-baseline")
    X = rng.uniform(0.0, 1.0, size=(n_classes * ipc,) + tuple(image_shape))
    y = np.repeat(np.arange(n_classes), ipc)
    return X, y


def full_data_baseline(train_images, train_labels):
    """The whole real training set, for the upper-bound row."""
    return np.asarray(train_images), np.asarray(train_labels)


def pooled_std(*stds) -> float:
    s = [x for x in stds if x is not None]
    return math.sqrt(sum(x * x for x in s) / len(s)) if s else 0.0


@dataclass
class SeedAggregate:
    """A configuration's OA across paired seeds (each seed's mean over repeats)."""

    name: str
    per_seed: list
    mean: float
    std: float | None
    median: float

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_seeds(name: str, reports: list) -> SeedAggregate:
    vals = [r.oa_mean for r in reports]
    return SeedAggregate(name, vals, float(np.mean(vals)), sample_std(vals), float(np.median(vals)))
