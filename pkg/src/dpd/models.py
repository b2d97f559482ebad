"""Noise-prediction MLP and pixel classifier MLP on top of :mod:`dpd.autodiff`."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .autodiff import GradTape, ParamTree, Tensor
from .diffusion import NoiseSchedule
from .rng import substream

__all__ = [
    "DenoiserConfig",
    "ClassifierConfig",
    "init_mlp",
    "mlp_forward",
    "time_embedding",
    "init_denoiser",
    "denoiser_forward",
    "init_classifier",
    "classifier_logits",
    "classifier_forward",
    "train_classifier",
    "MLPImageClassifier",
]


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 64
    time_embed_dim: int = 32
    text_embed_dim: int = 32
    hidden: tuple = (256, 256)
    nonlinearity: str = "silu"

    @property
    def input_dim(self) -> int:
        return self.latent_dim + self.time_embed_dim + self.text_embed_dim


@dataclass(frozen=True)
class ClassifierConfig:
    image_shape: tuple = (16, 16)
    hidden: tuple = (128,)
    n_classes: int = 4
    nonlinearity: str = "silu"

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.image_shape))


_ACT = {"silu": ad.silu, "tanh": ad.tanh}
# fixed input normalisation, like per-channel mean/std scaling of image nets
_PIXEL_MEAN, _PIXEL_STD = 0.5, 0.25


def init_mlp(widths, rng: np.random.Generator, zero_last: bool = False) -> ParamTree:
    params = {}
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        w = np.zeros((n_in, n_out)) if (last and zero_last) else rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)
        params[f"layer{i}.weight"] = w
        params[f"layer{i}.bias"] = np.zeros((1, n_out))
    return ParamTree(params)


def mlp_forward(params: ParamTree, x: Tensor, n_layers: int, act: str = "silu") -> Tensor:
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])
        if i < n_layers - 1:
            h = _ACT[act](h)
    return h


def time_embedding(t, T: int, dim: int = 32) -> np.ndarray:
    """Sinusoidal features of ``t / T`` with geometric frequencies 1..1000."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def init_denoiser(cfg: DenoiserConfig, seed: int = 0, zero_last: bool = False) -> ParamTree:
    widths = (cfg.input_dim,) + tuple(cfg.hidden) + (cfg.latent_dim,)
    return init_mlp(widths, substream(seed, "denoiser-init"), zero_last=zero_last)


def denoiser_forward(theta: ParamTree, zt, t, e, sched: NoiseSchedule, cfg: DenoiserConfig | None = None) -> Tensor:
    """Predicted noise for a batch of noised latents.

    ``t`` is a scalar or one timestep per row; ``e`` is one embedding shared
    by the batch or one per row.
    """
    zt = zt if isinstance(zt, Tensor) else Tensor(np.atleast_2d(zt))
    n, d = zt.shape
    sched._check_t(t)
    n_layers = len(theta) // 2
    w0 = theta["layer0.weight"]
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    if e.shape[0] == 1 and n > 1:
        e = np.repeat(e, n, axis=0)
    t_dim = w0.shape[0] - d - e.shape[1]
    if t_dim <= 0 or e.shape[0] != n:
        raise ValueError(
            f"denoiser input mismatch: latents {zt.shape}, embeddings {e.shape}, first layer {w0.shape}"
        )
    temb = time_embedding(np.broadcast_to(t, (n,)), sched.T, t_dim)
    x = ad.concat([zt, Tensor(temb), Tensor(e)], axis=1)
    out = mlp_forward(theta, x, n_layers, (cfg.nonlinearity if cfg else "silu"))
    if out.shape != zt.shape:
        raise ValueError(f"denoiser output {out.shape} does not match latent shape {zt.shape}")
    return out


def init_classifier(cfg: ClassifierConfig, seed: int = 0, zero: bool = False) -> ParamTree:
    widths = (cfg.input_dim,) + tuple(cfg.hidden) + (cfg.n_classes,)
    params = init_mlp(widths, substream(seed, "classifier-init"))
    return params.map(np.zeros_like) if zero else params


def classifier_logits(phi: ParamTree, pixels, act: str = "silu") -> Tensor:
    """Logits for flattened or ``(N, H, W)`` pixels, normalised as ``(x - 0.5) / 0.25``."""
    x = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels, dtype=np.float64))
    n_in = phi["layer0.weight"].shape[0]
    if x.data.ndim != 2:
        x = ad.reshape(x, (x.shape[0], -1) if x.data.ndim > 2 else (1, -1))
    if x.shape[1] != n_in:
        raise ValueError(f"classifier expects {n_in} pixels per image, got {x.shape[1]}")
    x = ad.scalar_mul(ad.add(x, Tensor(np.full((1, 1), -_PIXEL_MEAN))), 1.0 / _PIXEL_STD)
    return mlp_forward(phi, x, len(phi) // 2, act)


def classifier_forward(phi: ParamTree, pixels) -> np.ndarray:
    """Class probabilities, one row per image."""
    logits = classifier_logits(phi, pixels).data
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def train_classifier(
    X,
    y,
    cfg: ClassifierConfig,
    epochs: int = 10,
    batch: int = 32,
    lr: float = 1e-4,
    seed: int = 0,
    weight_decay: float = 0.0,
    steps: int | None = None,
    return_history: bool = False,
):
    """Adam-train a classifier on images ``X`` with labels ``y``.

    With ``steps`` set, training runs for exactly that many minibatch
    updates (reshuffling each pass) instead of ``epochs`` passes.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot train a classifier on an empty dataset")
    X = X.reshape(len(X), -1)
    if len(X) != len(y):
        raise ValueError(f"{len(X)} images but {len(y)} labels")
    if y.min() < 0 or y.max() >= cfg.n_classes:
        raise ValueError(f"labels must lie in [0, {cfg.n_classes})")
    phi = init_classifier(cfg, seed)
    state = ad.adam_init(phi)
    rng = substream(seed, "classifier-batches")
    per_epoch = math.ceil(len(X) / batch)
    total = steps if steps is not None else epochs * per_epoch
    history, epoch_losses, done = [], [], 0
    while done < total:
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch):
            idx = order[start : start + batch]
            with GradTape() as tape:
                tape.watch(phi)
                loss = ad.softmax_cross_entropy(classifier_logits(phi, X[idx], cfg.nonlinearity), y[idx])
            grads = ad.backward(tape, loss)
            phi, state = ad.adam_step(phi, grads, state, lr, weight_decay=weight_decay)
            epoch_losses.append(loss.data.item())
            done += 1
            if done >= total:
                break
        history.append(float(np.mean(epoch_losses)))
        epoch_losses = []
    return (phi, history) if return_history else phi


class MLPImageClassifier(ClassifierMixin, BaseEstimator):
    """One-hidden-layer pixel classifier trained with Adam.

    Labels must be integers in ``[0, n_classes)``; ``n_classes=None`` infers
    ``max(y) + 1``.
    """

    def __init__(
        self,
        image_shape=(16, 16),
        hidden_layer_sizes=(128,),
        n_classes=None,
        epochs=10,
        batch_size=32,
        learning_rate=1e-4,
        weight_decay=0.0,
        max_steps=None,
        random_state=0,
    ):
        self.image_shape = image_shape
        self.hidden_layer_sizes = hidden_layer_sizes
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_steps = max_steps
        self.random_state = random_state

    def _config(self, n_classes: int) -> ClassifierConfig:
        return ClassifierConfig(tuple(self.image_shape), tuple(self.hidden_layer_sizes), n_classes)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True)
        y = y.astype(np.int64)
        n_classes = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        self.config_ = self._config(n_classes)
        self.params_, self.loss_history_ = train_classifier(
            X.reshape(len(X), -1),
            y,
            self.config_,
            epochs=self.epochs,
            batch=self.batch_size,
            lr=self.learning_rate,
            seed=self.random_state,
            weight_decay=self.weight_decay,
            steps=self.max_steps,
            return_history=True,
        )
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = self.config_.input_dim
        return self

    @classmethod
    def from_params(cls, params: ParamTree, image_shape=(16, 16)) -> "MLPImageClassifier":
        """Wrap already-trained parameters, e.g. a loaded checkpoint."""
        n_layers = len(params) // 2
        hidden = tuple(params[f"layer{i}.weight"].shape[1] for i in range(n_layers - 1))
        n_classes = params[f"layer{n_layers - 1}.weight"].shape[1]
        clf = cls(image_shape=image_shape, hidden_layer_sizes=hidden, n_classes=n_classes)
        clf.config_ = clf._config(n_classes)
        clf.params_ = params
        clf.loss_history_ = []
        clf.classes_ = np.arange(n_classes)
        clf.n_features_in_ = clf.config_.input_dim
        return clf

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, allow_nd=True)
        return classifier_forward(self.params_, X.reshape(len(X), -1))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
