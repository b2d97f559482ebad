"""Classification-consistent diffusion training and prototype-guided distillation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_X_y

from . import autodiff as ad
from .autodiff import GradTape, NonFiniteError, ParamTree, Tensor
from .codec import decode, decode_tensor, encode
from .conditioning import Vocabulary, caption, embed, template_caption
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    build_schedule,
    estimate_clean_tensor,
    forward_diffuse,
    sample,
)
from .models import (
    DenoiserConfig,
    MLPImageClassifier,
    classifier_logits,
    denoiser_forward,
    init_denoiser,
)
from .prototype import build_prototypes
from .rng import substream

log = logging.getLogger(__name__)

__all__ = [
    "NumericalError",
    "DivergenceError",
    "TrainConfig",
    "DistillConfig",
    "DiffusionBatch",
    "LossParts",
    "DistilledDataset",
    "config_hash",
    "compute_total_loss",
    "train_diffusion",
    "distill",
    "ABLATION_ROWS",
    "AblationRow",
    "DPDDistiller",
]


class NumericalError(RuntimeError):
    """Loss or state became non-finite."""


class DivergenceError(NumericalError):
    def __init__(self, message: str, step: int, last_checkpoint: ParamTree | None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint


def config_hash(cfg) -> str:
    payload = json.dumps(asdict(cfg) if not isinstance(cfg, dict) else cfg, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.3
    T_train: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.03
    steps: int = 20_000
    batch: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.0
    hidden: tuple = (256, 256)
    time_embed_dim: int = 32
    template_prob: float = 0.2
    checkpoint_every: int = 0
    divergence_threshold: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T_train, self.beta_start, self.beta_end)

    def denoiser_config(self, latent_dim: int, text_dim: int) -> DenoiserConfig:
        return DenoiserConfig(latent_dim, self.time_embed_dim, text_dim, self.hidden)


@dataclass(frozen=True)
class DistillConfig:
    ipc: int = 10
    steps: int = 50
    tau: float = 0.3
    eta: float = 0.0
    init: str = "prototype"  # or "noise"
    caption_mode: str = "aggregated"  # or "template"
    seed: int = 0

    def __post_init__(self):
        if self.ipc < 1:
            raise ValueError("IPC must be >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.init not in ("prototype", "noise"):
            raise ValueError(f"init must be 'prototype' or 'noise', got {self.init!r}")
        if self.caption_mode not in ("aggregated", "template"):
            raise ValueError(f"caption_mode must be 'aggregated' or 'template', got {self.caption_mode!r}")

    def t_start(self, T: int) -> int:
        return max(1, int(round(self.tau * T)))

    def sampler(self, T: int) -> SamplerConfig:
        t0 = self.t_start(T) if self.init == "prototype" else T
        return SamplerConfig(num_steps=self.steps, t_start=t0, eta=self.eta)


@dataclass
class DiffusionBatch:
    """One training minibatch with its sampled timesteps and noise."""

    z0: np.ndarray  # (B, d)
    labels: np.ndarray  # (B,)
    emb: np.ndarray  # (B, m)
    t: np.ndarray  # (B,) in [1, T]
    eps: np.ndarray  # (B, d)


@dataclass(frozen=True)
class LossParts:
    total: float
    diffusion: float
    classification: float


def compute_total_loss(
    theta: ParamTree,
    phi: ParamTree,
    batch: DiffusionBatch,
    sched: NoiseSchedule,
    lam: float,
    image_shape=(16, 16),
) -> tuple:
    """``L_D + lam * L_cls`` on one batch, as a tape-tracked scalar plus its parts.

    ``L_D`` is the mean squared error between true and predicted noise;
    ``L_cls`` the mean cross-entropy of the frozen classifier on the decoded
    one-step clean estimate. With ``lam == 0`` the classification term is
    still reported but kept off the tape.
    """
    try:
        zt = forward_diffuse(batch.z0, batch.t, batch.eps, sched)
        eps_hat = denoiser_forward(theta, zt, batch.t, batch.emb, sched)
        diff = ad.sub(eps_hat, Tensor(batch.eps))
        l_d = ad.scalar_mul(ad.sum_of_squares(diff), 1.0 / diff.size)

        def cls_term():
            z0_hat = estimate_clean_tensor(zt, eps_hat, batch.t, sched)
            x_hat = decode_tensor(z0_hat, image_shape)
            return ad.softmax_cross_entropy(classifier_logits(phi, x_hat), batch.labels)

        if lam == 0:
            with ad.no_grad():
                l_cls = cls_term()
            total = l_d
        else:
            l_cls = cls_term()
            total = ad.add(l_d, ad.scalar_mul(l_cls, lam))
    except NonFiniteError as exc:
        ab = sched.abar(batch.t)
        raise NumericalError(
            f"non-finite loss: t={batch.t.tolist()}, alpha_bar={np.round(ab, 6).tolist()}, "
            f"|z0|max={np.abs(batch.z0).max():.3g}, |eps|max={np.abs(batch.eps).max():.3g}, "
            f"|theta|max={max(np.abs(v.data).max() for v in theta.values()):.3g}"
        ) from exc
    parts = LossParts(total.data.item(), l_d.data.item(), l_cls.data.item())
    return total, parts


def _digest(phi: ParamTree) -> str:
    return phi.digest()


def train_diffusion(
    latents: np.ndarray,
    labels: np.ndarray,
    embeddings: np.ndarray,
    phi: ParamTree,
    cfg: TrainConfig,
    image_shape=(16, 16),
    on_checkpoint: Callable[[int, ParamTree], None] | None = None,
    template_embeddings: np.ndarray | None = None,
) -> tuple:
    """Train the noise predictor; returns ``(theta, history)``.

    ``latents``, ``labels`` and ``embeddings`` describe the real training set
    (one caption embedding per image). If ``template_embeddings`` (one row
    per class) is given, each item's caption embedding is swapped for its
    class template with probability ``cfg.template_prob``. ``history`` has
    per-step arrays ``"diffusion"`` and ``"classification"``.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if not (len(latents) == len(labels) == len(embeddings)) or len(latents) == 0:
        raise ValueError("latents, labels and embeddings must be non-empty and aligned")
    sched = cfg.schedule()
    dcfg = cfg.denoiser_config(latents.shape[1], embeddings.shape[1])
    theta = init_denoiser(dcfg, cfg.seed)
    state = ad.adam_init(theta)
    rng = substream(cfg.seed, "diffusion")
    phi_digest = _digest(phi)
    hist_d = np.zeros(cfg.steps)
    hist_c = np.zeros(cfg.steps)
    checkpoint = theta
    n = len(latents)
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch)
        t = rng.integers(1, sched.T + 1, size=cfg.batch)
        eps = rng.standard_normal((cfg.batch, latents.shape[1]))
        emb = embeddings[idx]
        if template_embeddings is not None:
            swap = rng.random(cfg.batch) < cfg.template_prob
            emb = np.where(swap[:, None], template_embeddings[labels[idx]], emb)
        batch = DiffusionBatch(latents[idx], labels[idx], emb, t, eps)
        with GradTape() as tape:
            tape.watch(theta)
            total, parts = compute_total_loss(theta, phi, batch, sched, cfg.lam, image_shape)
        if parts.total > cfg.divergence_threshold:
            raise DivergenceError(
                f"loss {parts.total:.3g} exceeded {cfg.divergence_threshold:g} at step {step}",
                step,
                checkpoint,
            )
        grads = ad.backward(tape, total)
        theta, state = ad.adam_step(theta, grads, state, cfg.lr, weight_decay=cfg.weight_decay)
        hist_d[step] = parts.diffusion
        hist_c[step] = parts.classification
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint = theta
            if on_checkpoint is not None:
                on_checkpoint(step + 1, theta)
        if log.isEnabledFor(logging.DEBUG) and step % 1000 == 0:
            log.debug("step %d  L_D %.4f  L_cls %.4f", step, parts.diffusion, parts.classification)
    if _digest(phi) != phi_digest:
        raise RuntimeError("classifier parameters changed during diffusion training")
    return theta, {"diffusion": hist_d, "classification": hist_c}


@dataclass
class DistilledDataset:
    images: np.ndarray
    labels: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)


def distill(
    theta: ParamTree,
    prototypes: list,
    vocab: Vocabulary,
    dcfg: DistillConfig,
    sched: NoiseSchedule,
    n_classes: int,
    image_shape=(16, 16),
) -> DistilledDataset:
    """Generate one image per prototype pair.

    With ``init="prototype"`` each prototype latent is noised to
    ``round(tau * T)`` using noise seeded by (seed, class, cluster) and then
    denoised; ``init="noise"`` instead starts from pure Gaussian noise at
    ``T``. ``caption_mode="template"`` conditions on the class token alone.
    """
    if len(prototypes) != n_classes * dcfg.ipc:
        raise ValueError(f"expected {n_classes * dcfg.ipc} prototypes (C * IPC), got {len(prototypes)}")
    pairs = sorted(prototypes, key=lambda p: (p.label, p.cluster))
    counts = np.bincount([p.label for p in pairs], minlength=n_classes)
    if np.any(counts != dcfg.ipc):
        raise ValueError(f"need exactly {dcfg.ipc} prototypes per class, got {counts.tolist()}")
    scfg = dcfg.sampler(sched.T)
    Z0 = np.stack([p.latent for p in pairs])
    eps = np.stack([substream(dcfg.seed, "distill", p.label, p.cluster).standard_normal(Z0.shape[1]) for p in pairs])
    if dcfg.init == "prototype":
        z_init = forward_diffuse(Z0, scfg.t_start, eps, sched)
    else:
        z_init = eps
    caps = [
        p.caption if dcfg.caption_mode == "aggregated" else template_caption(vocab.class_names[p.label], vocab)
        for p in pairs
    ]
    E = np.stack([embed(c, vocab) for c in caps])

    def denoiser_fn(z, t, e):
        return denoiser_forward(theta, z, t, e, sched).data

    z_hat = sample(denoiser_fn, E, z_init, scfg, sched, rng=substream(dcfg.seed, "distill-eta"))
    images = decode(z_hat, image_shape)
    manifest = {
        "config_hash": config_hash(dcfg),
        "config": asdict(dcfg),
        "seed": dcfg.seed,
        "t_start": scfg.t_start,
        "theta_digest": theta.digest(),
        "prototypes": [
            {
                "class": p.label,
                "cluster": p.cluster,
                "source_index": p.source_index,
                "caption": list(c.tokens),
                "caption_words": vocab.words(c),
            }
            for p, c in zip(pairs, caps)
        ],
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    return DistilledDataset(images, np.asarray([p.label for p in pairs], dtype=np.int64), manifest)


@dataclass(frozen=True)
class AblationRow:
    name: str
    lam: float
    init: str
    caption_mode: str
    uses_cls: bool
    uses_prototypes: bool
    uses_aggregation: bool


ABLATION_ROWS = (
    AblationRow("L_D", 0.0, "noise", "template", False, False, False),
    AblationRow("+L_cls", 0.3, "noise", "template", True, False, False),
    AblationRow("+Vis. Prot.", 0.3, "prototype", "template", True, True, False),
    AblationRow("+Cap. Agg.", 0.3, "prototype", "aggregated", True, True, True),
)


class DPDDistiller(BaseEstimator):
    """Dataset distiller with a scikit-learn style interface.

    ``fit(X, y)`` pretrains (or adopts) the frozen classifier, captions the
    images and trains the conditional noise predictor. ``resample`` then
    extracts ``ipc`` prototypes per class from the fitted data and returns a
    synthetic ``(X_distilled, y_distilled)`` pair; ``fit_resample`` does both.
    """

    def __init__(
        self,
        ipc=10,
        lam=0.3,
        n_steps=20_000,
        batch_size=64,
        learning_rate=1e-4,
        weight_decay=0.0,
        T_train=200,
        beta_start=1e-4,
        beta_end=0.03,
        sampler_steps=50,
        tau=0.3,
        init="prototype",
        caption_mode="aggregated",
        image_shape=(16, 16),
        latent_dim=64,
        class_names=None,
        classifier=None,
        random_state=0,
    ):
        self.ipc = ipc
        self.lam = lam
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.T_train = T_train
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.sampler_steps = sampler_steps
        self.tau = tau
        self.init = init
        self.caption_mode = caption_mode
        self.image_shape = image_shape
        self.latent_dim = latent_dim
        self.class_names = class_names
        self.classifier = classifier
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lam=self.lam,
            T_train=self.T_train,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            steps=self.n_steps,
            batch=self.batch_size,
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
            seed=self.random_state,
        )

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            ipc=self.ipc,
            steps=self.sampler_steps,
            tau=self.tau,
            init=self.init,
            caption_mode=self.caption_mode,
            seed=self.random_state,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True)
        X = X.reshape((len(X),) + tuple(self.image_shape))
        y = y.astype(np.int64)
        n_classes = int(y.max()) + 1
        names = tuple(self.class_names) if self.class_names is not None else tuple(f"class-{c}" for c in range(n_classes))
        if self.classifier is None:
            clf = MLPImageClassifier(self.image_shape, n_classes=n_classes, random_state=self.random_state).fit(X, y)
        else:
            clf = self.classifier
        self.classifier_ = clf
        self.vocabulary_ = Vocabulary.build(names, seed=self.random_state)
        self.captions_ = [caption(x, names[c], self.vocabulary_) for x, c in zip(X, y)]
        emb = np.stack([embed(c, self.vocabulary_) for c in self.captions_])
        self.latents_ = encode(X, self.image_shape, self.latent_dim)
        templates = np.stack([embed(template_caption(n, self.vocabulary_), self.vocabulary_) for n in names])
        self.theta_, self.history_ = train_diffusion(
            self.latents_, y, emb, clf.params_, self.train_config(), self.image_shape,
            template_embeddings=templates,
        )
        self.X_fit_, self.y_fit_ = X, y
        self.n_classes_ = n_classes
        self.class_names_ = names
        return self

    def prototypes(self) -> list:
        check_is_fitted(self, "theta_")
        return build_prototypes(
            self.X_fit_,
            self.y_fit_,
            self.class_names_,
            self.vocabulary_,
            self.ipc,
            seed=self.random_state,
            encoder=lambda x: encode(x, self.image_shape, self.latent_dim),
            captions=self.captions_,
        )

    def resample(self, prototypes: list | None = None) -> DistilledDataset:
        check_is_fitted(self, "theta_")
        protos = prototypes if prototypes is not None else self.prototypes()
        return distill(
            self.theta_,
            protos,
            self.vocabulary_,
            self.distill_config(),
            self.train_config().schedule(),
            self.n_classes_,
            self.image_shape,
        )

    def fit_resample(self, X, y):
        ds = self.fit(X, y).resample()
        return ds.images, ds.labels
