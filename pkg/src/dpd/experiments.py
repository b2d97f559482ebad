"""End-to-end runs on the toy harness: single pipeline, ablation rows, sweeps.

Everything hangs off one flat :class:`RunConfig`. A :class:`Workspace`
holds the pieces shared by every run on a dataset (data, frozen classifier,
vocabulary, captions, latents); :class:`TrainingCache` makes runs that only
differ in distillation settings reuse one trained noise predictor.
"""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .autodiff import ParamTree
from .codec import encode
from .conditioning import Vocabulary, caption, embed, template_caption
from .data import ToyDataset, ToyDatasetSpec, generate_toy_dataset
from .evaluation import (
    EvalConfig,
    EvalReport,
    aggregate_seeds,
    evaluate,
    full_data_baseline,
    noise_baseline,
)
from .io import load_params, save_params
from .models import ClassifierConfig, train_classifier
from .pipeline import ABLATION_ROWS, DistillConfig, DistilledDataset, TrainConfig, config_hash, distill, train_diffusion
from .prototype import build_prototypes
from .rng import substream

log = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "Workspace",
    "TrainingCache",
    "n_threads",
    "prepare",
    "run_pipeline",
    "PipelineResult",
    "ablation_suite",
    "AblationResult",
    "sweep",
    "SweepResult",
    "baselines",
    "SWEEP_DEFAULTS",
]

SWEEP_DEFAULTS = {
    "lambda": (0.0, 0.1, 0.3, 0.5, 1.0),
    "sampler_steps": (10, 25, 50),
    "ipc": (3, 5, 10, 15, 20),
}


def n_threads() -> int:
    """Worker cap from ``DPD_THREADS`` (default 1)."""
    raw = os.environ.get("DPD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DPD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"DPD_THREADS must be a positive integer, got {raw!r}")
    return n


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; JSON config files use these field names."""

    seed: int = 0
    # toy data
    n_classes: int = 4
    modes_per_class: int = 2
    train_per_class: int = 200
    test_per_class: int = 100
    noise: float = 0.08
    # frozen classifier
    cls_hidden: tuple = (128,)
    cls_epochs: int = 10
    cls_batch: int = 32
    cls_lr: float = 1e-4
    # diffusion training
    lam: float = 0.3
    T_train: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.03
    train_steps: int = 20_000
    batch: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.0
    template_prob: float = 0.2
    checkpoint_every: int = 0
    # distillation
    ipc: int = 10
    sampler_steps: int = 50
    tau: float = 0.3
    eta: float = 0.0
    init: str = "prototype"
    caption_mode: str = "aggregated"
    # downstream evaluation
    eval_repeats: int = 10
    eval_steps: int = 300
    eval_batch: int = 32
    eval_lr: float = 1e-3
    # multi-run experiments
    seeds: tuple = (0, 1, 2, 3, 4)
    sweep_param: str = "lambda"
    sweep_values: tuple = ()

    def __post_init__(self):
        for name in ("cls_hidden", "seeds", "sweep_values"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.sweep_param not in SWEEP_DEFAULTS:
            raise ValueError(f"sweep_param must be one of {sorted(SWEEP_DEFAULTS)}, got {self.sweep_param!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        # surface invalid values early
        self.dataset_spec()
        self.train_config()
        self.distill_config()
        self.eval_config()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def dataset_spec(self) -> ToyDatasetSpec:
        return ToyDatasetSpec(
            n_classes=self.n_classes,
            modes_per_class=self.modes_per_class,
            train_per_class=self.train_per_class,
            test_per_class=self.test_per_class,
            noise=self.noise,
            seed=self.seed,
        )

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(hidden=self.cls_hidden, n_classes=self.n_classes)

    def train_config(self, seed: int | None = None, lam: float | None = None) -> TrainConfig:
        return TrainConfig(
            lam=self.lam if lam is None else lam,
            T_train=self.T_train,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            steps=self.train_steps,
            batch=self.batch,
            lr=self.lr,
            weight_decay=self.weight_decay,
            template_prob=self.template_prob,
            checkpoint_every=self.checkpoint_every,
            seed=self.seed if seed is None else seed,
        )

    def distill_config(self, seed: int | None = None, **overrides) -> DistillConfig:
        base = DistillConfig(
            ipc=self.ipc,
            steps=self.sampler_steps,
            tau=self.tau,
            eta=self.eta,
            init=self.init,
            caption_mode=self.caption_mode,
            seed=self.seed if seed is None else seed,
        )
        dc = replace(base, **overrides)
        dc.sampler(self.T_train)  # validates steps <= t_start
        return dc

    def eval_config(self) -> EvalConfig:
        return EvalConfig(steps=self.eval_steps, batch=self.eval_batch, lr=self.eval_lr, repeats=self.eval_repeats)


@dataclass
class Workspace:
    """Per-dataset state shared by every run."""

    cfg: RunConfig
    dataset: ToyDataset
    phi: ParamTree
    vocab: Vocabulary
    captions: list
    embeddings: np.ndarray
    latents: np.ndarray
    template_embeddings: np.ndarray
    _prototypes: dict = field(default_factory=dict, repr=False)

    @property
    def image_shape(self) -> tuple:
        return self.dataset.train.images.shape[1:]

    @property
    def class_names(self) -> tuple:
        return self.dataset.class_names

    def data_digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.latents, self.embeddings, self.template_embeddings, self.dataset.train.labels):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        h.update(self.phi.digest().encode())
        return h.hexdigest()[:16]

    def prototypes(self, seed: int, ipc: int) -> list:
        key = (seed, ipc)
        if key not in self._prototypes:
            tr = self.dataset.train
            self._prototypes[key] = build_prototypes(
                tr.images, tr.labels, self.class_names, self.vocab, ipc, seed=seed, captions=self.captions
            )
        return self._prototypes[key]


def pretrain_classifier(dataset: ToyDataset, cfg: RunConfig) -> ParamTree:
    tr = dataset.train
    return train_classifier(
        tr.images,
        tr.labels,
        cfg.classifier_config(),
        epochs=cfg.cls_epochs,
        batch=cfg.cls_batch,
        lr=cfg.cls_lr,
        seed=int(substream(cfg.seed, "classifier").integers(2**31)),
    )


def prepare(cfg: RunConfig, dataset: ToyDataset | None = None, phi: ParamTree | None = None) -> Workspace:
    """Generate (or adopt) data and classifier, then caption and encode the training set."""
    dataset = dataset or generate_toy_dataset(cfg.dataset_spec())
    phi = phi if phi is not None else pretrain_classifier(dataset, cfg)
    names = dataset.class_names
    vocab = Vocabulary.build(names, seed=cfg.seed)
    tr = dataset.train
    caps = [caption(x, names[c], vocab) for x, c in zip(tr.images, tr.labels)]
    emb = np.stack([embed(c, vocab) for c in caps])
    tmpl = np.stack([embed(template_caption(n, vocab), vocab) for n in names])
    return Workspace(cfg, dataset, phi, vocab, caps, emb, encode(tr.images), tmpl)


def _train(ws: Workspace, tcfg: TrainConfig):
    return train_diffusion(
        ws.latents,
        ws.dataset.train.labels,
        ws.embeddings,
        ws.phi,
        tcfg,
        ws.image_shape,
        template_embeddings=ws.template_embeddings,
    )


class TrainingCache:
    """Trained noise predictors keyed by training config and input digest.

    With ``directory`` set, checkpoints persist as ``<key>.dpds`` files so
    separate processes (or test sessions) can share them.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._mem = {}
        self.histories = {}

    def key(self, ws: Workspace, tcfg: TrainConfig) -> str:
        return f"{config_hash(tcfg)}-{ws.data_digest()}"

    def _path(self, key):
        return self.directory / f"theta-{key}.dpds" if self.directory is not None else None

    def lookup(self, ws: Workspace, tcfg: TrainConfig) -> ParamTree | None:
        key = self.key(ws, tcfg)
        if key in self._mem:
            return self._mem[key]
        path = self._path(key)
        if path is not None and path.exists():
            self._mem[key] = load_params(path)
            return self._mem[key]
        return None

    def store(self, ws: Workspace, tcfg: TrainConfig, theta: ParamTree, history=None) -> None:
        key = self.key(ws, tcfg)
        self._mem[key] = theta
        if history is not None:
            self.histories[key] = history
        path = self._path(key)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_params(path, theta)

    def get(self, ws: Workspace, tcfg: TrainConfig) -> ParamTree:
        theta = self.lookup(ws, tcfg)
        if theta is None:
            theta, hist = _train(ws, tcfg)
            self.store(ws, tcfg, theta, hist)
        return theta

    def ensure(self, ws: Workspace, tcfgs, n_jobs: int | None = None) -> None:
        """Train every missing config, in parallel up to ``n_jobs`` workers."""
        todo, seen = [], set()
        for t in tcfgs:
            k = self.key(ws, t)
            if k not in seen and self.lookup(ws, t) is None:
                todo.append(t)
                seen.add(k)
        if not todo:
            return
        n_jobs = min(n_jobs or n_threads(), len(todo))
        log.info("training %d noise predictors on %d worker(s)", len(todo), n_jobs)
        if n_jobs == 1:
            results = [_train(ws, t) for t in todo]
        else:
            results = Parallel(n_jobs=n_jobs)(delayed(_train)(ws, t) for t in todo)
        for t, (theta, hist) in zip(todo, results):
            self.store(ws, t, theta, hist)


def _distill_and_eval(ws: Workspace, theta: ParamTree, dcfg: DistillConfig, name: str, lam: float):
    cfg = ws.cfg
    sched = cfg.train_config().schedule()
    protos = ws.prototypes(dcfg.seed, dcfg.ipc)
    ds = distill(theta, protos, ws.vocab, dcfg, sched, cfg.n_classes, ws.image_shape)
    te = ws.dataset.test
    rep = evaluate(
        ds.images,
        ds.labels,
        te.images,
        te.labels,
        cfg.eval_config(),
        seed=dcfg.seed,
        name=name,
        n_classes=cfg.n_classes,
        ipc=dcfg.ipc,
        n_train_real=len(ws.dataset.train),
        config_hash=config_hash({"distill": asdict(dcfg), "lam": lam, "train": config_hash(cfg.train_config(dcfg.seed, lam))}),
    )
    return ds, rep


@dataclass
class PipelineResult:
    distilled: DistilledDataset
    report: EvalReport
    theta: ParamTree
    prototypes: list
    history: dict | None


def run_pipeline(ws: Workspace, cache: TrainingCache | None = None, seed: int | None = None) -> PipelineResult:
    """Train (or reuse) the noise predictor, distil with ``ws.cfg`` and evaluate once."""
    cfg = ws.cfg
    seed = cfg.seed if seed is None else seed
    cache = cache or TrainingCache()
    tcfg = cfg.train_config(seed)
    theta = cache.get(ws, tcfg)
    dcfg = cfg.distill_config(seed)
    ds, rep = _distill_and_eval(ws, theta, dcfg, "DPD", cfg.lam)
    return PipelineResult(ds, rep, theta, ws.prototypes(seed, dcfg.ipc), cache.histories.get(cache.key(ws, tcfg)))


@dataclass
class AblationResult:
    rows: list  # AblationRow
    reports: dict  # row name -> [EvalReport per seed]
    aggregates: dict  # row name -> SeedAggregate
    seeds: tuple

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "rows": [
                {**asdict(r), **self.aggregates[r.name].to_dict(), "reports": [x.to_dict() for x in self.reports[r.name]]}
                for r in self.rows
            ],
        }


def ablation_suite(ws: Workspace, seeds=None, cache: TrainingCache | None = None, rows=ABLATION_ROWS) -> AblationResult:
    """The four ablation rows over paired seeds (same seeds for every row)."""
    cfg = ws.cfg
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    cache = cache or TrainingCache()
    cache.ensure(ws, [cfg.train_config(s, r.lam) for r in rows for s in seeds])
    reports = {r.name: [] for r in rows}
    for s in seeds:
        for r in rows:
            theta = cache.get(ws, cfg.train_config(s, r.lam))
            dcfg = cfg.distill_config(s, init=r.init, caption_mode=r.caption_mode)
            reports[r.name].append(_distill_and_eval(ws, theta, dcfg, r.name, r.lam)[1])
    aggs = {name: aggregate_seeds(name, reps) for name, reps in reports.items()}
    return AblationResult(list(rows), reports, aggs, seeds)


@dataclass
class SweepResult:
    param: str
    values: list
    reports: dict  # value -> [EvalReport per seed]
    aggregates: dict  # value -> SeedAggregate
    seeds: tuple

    def argmax(self, stat: str = "median"):
        return max(self.values, key=lambda v: (getattr(self.aggregates[v], stat), -self.values.index(v)))

    def to_dict(self) -> dict:
        return {
            "param": self.param,
            "seeds": list(self.seeds),
            "points": [
                {"value": v, **self.aggregates[v].to_dict(), "reports": [x.to_dict() for x in self.reports[v]]}
                for v in self.values
            ],
        }


def sweep(ws: Workspace, param: str, values=None, seeds=None, cache: TrainingCache | None = None) -> SweepResult:
    """Full DPD per value of ``param`` (``lambda``, ``sampler_steps`` or ``ipc``)."""
    cfg = ws.cfg
    if param not in SWEEP_DEFAULTS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {sorted(SWEEP_DEFAULTS)}")
    values = list(values if values is not None and len(values) else SWEEP_DEFAULTS[param])
    if not values:
        raise ValueError("sweep values must be non-empty")
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    cache = cache or TrainingCache()
    lam_of = (lambda v: float(v)) if param == "lambda" else (lambda v: cfg.lam)
    cache.ensure(ws, [cfg.train_config(s, lam_of(v)) for v in values for s in seeds])
    reports = {}
    for v in values:
        reports[v] = []
        for s in seeds:
            theta = cache.get(ws, cfg.train_config(s, lam_of(v)))
            over = {"steps": int(v)} if param == "sampler_steps" else {"ipc": int(v)} if param == "ipc" else {}
            dcfg = cfg.distill_config(s, **over)
            reports[v].append(_distill_and_eval(ws, theta, dcfg, f"{param}={v}", lam_of(v))[1])
    aggs = {v: aggregate_seeds(f"{param}={v}", reports[v]) for v in values}
    return SweepResult(param, values, reports, aggs, seeds)


def baselines(ws: Workspace, ipc: int | None = None, full: bool = True) -> dict:
    """Full-data and uniform-noise reference rows under the same protocol."""
    cfg = ws.cfg
    ipc = ipc or cfg.ipc
    tr, te = ws.dataset.train, ws.dataset.test
    n_real = len(tr)
    out = {}
    if full:
        X, y = full_data_baseline(tr.images, tr.labels)
        out["full"] = evaluate(X, y, te.images, te.labels, cfg.eval_config(), seed=cfg.seed, name="Full-data", n_classes=cfg.n_classes, n_train_real=n_real)
    Xn, yn = noise_baseline(cfg.n_classes, ipc, ws.image_shape, seed=cfg.seed)
    out["noise"] = evaluate(Xn, yn, te.images, te.labels, cfg.eval_config(), seed=cfg.seed, name="Noise", n_classes=cfg.n_classes, ipc=ipc, n_train_real=n_real)
    return out
