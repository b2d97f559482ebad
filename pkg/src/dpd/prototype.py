"""Per-class latent clustering and margin-based prototype selection.

Within a class, latents are split into ``K`` clusters by k-means. Each
member's margin is its distance to the nearest *other* centroid minus its
distance to its own centroid, and the member with the largest margin
becomes that cluster's prototype. The cluster's captions are merged into
one description for the prototype.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_X_y

from .codec import encode
from .conditioning import Caption, Vocabulary, aggregate, caption
from .rng import substream

__all__ = [
    "ClassLatents",
    "Clustering",
    "PrototypePair",
    "kmeans",
    "margin",
    "margins",
    "select_prototypes",
    "build_prototypes",
    "PrototypeSelector",
]


@dataclass
class ClassLatents:
    label: int
    indices: np.ndarray  # (n,) global sample indices, unique
    latents: np.ndarray  # (n, d)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.latents = np.atleast_2d(np.asarray(self.latents, dtype=np.float64))
        if len(self.indices) != len(self.latents):
            raise ValueError("indices and latents differ in length")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("sample indices must be unique")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class Clustering:
    assignments: np.ndarray  # (n,) cluster per row of ClassLatents.latents
    centroids: np.ndarray  # (K, d)
    inertia: float
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def K(self) -> int:
        return len(self.centroids)


@dataclass(frozen=True)
class PrototypePair:
    label: int
    cluster: int
    source_index: int
    latent: np.ndarray
    caption: Caption


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen]).min(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _lloyd(X: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float) -> Clustering:
    K = len(centroids)
    history = []
    assign = None
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(X, centroids)
        assign = np.argmin(d2, axis=1)  # ties -> lowest cluster index
        for k in range(K):
            if not np.any(assign == k):
                own = d2[np.arange(len(X)), assign]
                counts = np.bincount(assign, minlength=K)
                own[counts[assign] <= 1] = -1.0  # never strip a singleton
                assign[int(np.argmax(own))] = k
        new = np.stack([X[assign == k].mean(axis=0) for k in range(K)])
        history.append(float(((X - new[assign]) ** 2).sum()))
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    return Clustering(assign, centroids, history[-1], history, it)


def kmeans(
    Zc: ClassLatents | np.ndarray,
    K: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    n_init: int = 10,
) -> Clustering:
    """k-means++ seeded Lloyd iterations; best of ``n_init`` restarts by inertia."""
    X = Zc.latents if isinstance(Zc, ClassLatents) else np.atleast_2d(np.asarray(Zc, dtype=np.float64))
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if len(X) < K:
        raise ValueError(f"cannot form {K} clusters from {len(X)} latents")
    rng = substream(seed, "kmeans")
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(X, _kmeanspp(X, K, rng), max_iters, tol)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def margin(zi, k: int, centroids) -> float:
    """Distance to the nearest other centroid minus distance to centroid ``k``.

    With a single centroid the first term is taken as zero, so the largest
    margin belongs to the member closest to the centroid.
    """
    zi = np.asarray(zi, dtype=np.float64)
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    dist = np.sqrt(((centroids - zi) ** 2).sum(axis=1))
    others = np.delete(dist, k)
    return float((others.min() if len(others) else 0.0) - dist[k])


def margins(X: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Vectorised :func:`margin` for every row of ``X``."""
    dist = np.sqrt(_sq_dists(X, centroids))
    own = dist[np.arange(len(X)), assignments]
    if centroids.shape[0] == 1:
        return -own
    masked = dist.copy()
    masked[np.arange(len(X)), assignments] = np.inf
    return masked.min(axis=1) - own


def select_prototypes(clustering: Clustering, Zc: ClassLatents) -> list:
    """``(k, sample_index)`` of the largest-margin member of each cluster."""
    m = margins(Zc.latents, clustering.assignments, clustering.centroids)
    out = []
    for k in range(clustering.K):
        rows = np.flatnonzero(clustering.assignments == k)
        rows = rows[np.argsort(Zc.indices[rows], kind="stable")]
        best = rows[int(np.argmax(m[rows]))]  # first max -> lowest sample index
        out.append((k, int(Zc.indices[best])))
    return out


def build_prototypes(
    images,
    labels,
    class_names,
    vocab: Vocabulary,
    K: int,
    seed: int = 0,
    *,
    encoder: Callable | None = None,
    captioner: Callable | None = None,
    aggregator: Callable | None = None,
    captions: list | None = None,
    kmeans_kwargs: dict | None = None,
) -> list:
    """Prototype pairs for every class, ``len(class_names) * K`` in total.

    ``captions`` may hold precomputed per-image captions; otherwise
    ``captioner(image, class_name, vocab)`` is called.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    encoder = encoder or (lambda x: encode(x, x.shape[1:]))
    captioner = captioner or caption
    aggregator = aggregator or aggregate
    Z = encoder(images)
    pairs = []
    for c, name in enumerate(class_names):
        idx = np.flatnonzero(labels == c)
        if len(idx) < K:
            raise ValueError(f"class {name!r} has {len(idx)} samples, fewer than K={K}")
        zc = ClassLatents(c, idx, Z[idx])
        cl = kmeans(zc, K, seed=_class_seed(seed, c), **(kmeans_kwargs or {}))
        for k, src in select_prototypes(cl, zc):
            members = idx[cl.assignments == k]
            caps = [
                captions[i] if captions is not None else captioner(images[i], name, vocab)
                for i in members
            ]
            pairs.append(PrototypePair(c, k, src, Z[src].copy(), aggregator(caps)))
    return pairs


def _class_seed(seed: int, c: int) -> int:
    return int(substream(seed, "prototype", c).integers(2**31))


class PrototypeSelector(BaseEstimator):
    """Margin-based prototype selection over labelled latent vectors.

    After ``fit(Z, y)``, ``prototype_indices_[c]`` lists the selected row
    indices of ``Z`` for class ``c`` (one per cluster) and
    ``clusterings_[c]`` holds the class's :class:`Clustering`.
    """

    def __init__(self, n_prototypes=10, max_iter=100, tol=1e-6, n_init=10, random_state=0):
        self.n_prototypes = n_prototypes
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, Z, y):
        Z, y = check_X_y(Z, y)
        self.classes_ = np.unique(y)
        self.clusterings_, self.prototype_indices_ = {}, {}
        for c in self.classes_:
            idx = np.flatnonzero(y == c)
            if len(idx) < self.n_prototypes:
                raise ValueError(f"class {c} has {len(idx)} samples, fewer than {self.n_prototypes}")
            zc = ClassLatents(int(c), idx, Z[idx])
            cl = kmeans(zc, self.n_prototypes, _class_seed(self.random_state, int(c)), self.max_iter, self.tol, self.n_init)
            self.clusterings_[c] = cl
            self.prototype_indices_[c] = [i for _, i in select_prototypes(cl, zc)]
        self.n_features_in_ = Z.shape[1]
        return self

    def prototypes(self, Z):
        """Rows of ``Z`` chosen as prototypes, with their labels."""
        check_is_fitted(self, "prototype_indices_")
        Z = np.asarray(Z)
        idx = [i for c in self.classes_ for i in self.prototype_indices_[c]]
        labels = [c for c in self.classes_ for _ in self.prototype_indices_[c]]
        return Z[idx], np.asarray(labels)
