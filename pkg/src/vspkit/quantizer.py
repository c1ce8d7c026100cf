"""K-means codebook over pooled frame features (visual speech units)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from ._io import atomic_write_text, decode_f32, encode_f32
from .corpus import FeatureSequence

CODEBOOK_VERSION = 1
SWEEP_KS = (50, 200, 2000)


class InsufficientDataError(ValueError):
    pass


class VersionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Codebook:
    k: int
    dim: int
    centroids: np.ndarray
    fit_seed: int
    inertia: float
    history: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float32)
        if c.shape != (self.k, self.dim) or self.k < 1:
            raise ValueError(f"centroids shape {c.shape} does not match k={self.k}, dim={self.dim}")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids contain non-finite values")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": CODEBOOK_VERSION,
                "k": self.k,
                "dim": self.dim,
                "fit_seed": self.fit_seed,
                "inertia": self.inertia,
                "centroids": encode_f32(self.centroids),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Codebook":
        obj = json.loads(text)
        if obj.get("version") != CODEBOOK_VERSION:
            raise VersionError(f"codebook version {obj.get('version')} is not {CODEBOOK_VERSION}")
        centroids = decode_f32(obj["centroids"], (obj["k"], obj["dim"]))
        return cls(obj["k"], obj["dim"], centroids, obj["fit_seed"], obj["inertia"])

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return cdist(x, c, "sqeuclidean")


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator, n_local_trials: int | None = None) -> np.ndarray:
    """Greedy k-means++: each new center is the best of several D^2-weighted draws."""
    n = x.shape[0]
    trials = n_local_trials or 2 + int(np.log(k))
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise InsufficientDataError(f"only {i} distinct points available for k={k}")
        picks = rng.choice(n, size=trials, p=closest / total)
        cand = np.minimum(closest[None, :], _sq_dists(x[picks], x))
        best = int(np.argmin(cand.sum(axis=1)))
        centers[i] = x[picks[best]]
        closest = cand[best]
    return centers


def _lloyd(x, centers, max_iters, tol):
    history = []
    for _ in range(max_iters):
        d = _sq_dists(x, centers)
        labels = d.argmin(axis=1)
        point_cost = d[np.arange(len(x)), labels]
        history.append(float(point_cost.sum()))

        counts = np.bincount(labels, minlength=len(centers))
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            # farthest points from their own centroid, one per empty cluster
            order = np.argsort(-point_cost, kind="stable")
            new[empty] = x[order[: empty.size]]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break
    d = _sq_dists(x, centers)
    inertia = float(d.min(axis=1).sum())
    history.append(inertia)
    return centers, inertia, history


def fit(frames, k: int = 200, seed: int = 0, max_iters: int = 100, tol: float = 1e-6, n_init: int = 1) -> Codebook:
    """k-means++ seeding followed by Lloyd iterations; best of ``n_init`` restarts."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"expected an N x dim matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input frames contain non-finite values")
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.shape[0] < k:
        raise InsufficientDataError(f"{x.shape[0]} points cannot support k={k} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers = kmeans_pp_init(x, k, rng)
        run = _lloyd(x, centers, max_iters, tol)
        if best is None or run[1] < best[1]:
            best = run
    centers, inertia, history = best
    return Codebook(k, x.shape[1], centers, seed, inertia, tuple(history))


def fit_corpus(samples, k: int = 200, seed: int = 0, **kwargs) -> Codebook:
    pooled = np.concatenate([s.features.frames for s in samples])
    return fit(pooled, k=k, seed=seed, **kwargs)


def assign(codebook: Codebook, features) -> np.ndarray:
    """Nearest-centroid unit per frame; ties go to the lowest centroid index."""
    frames = features.frames if isinstance(features, FeatureSequence) else np.asarray(features)
    if frames.ndim != 2 or frames.shape[1] != codebook.dim:
        raise ValueError(f"feature dim {frames.shape[-1]} does not match codebook dim {codebook.dim}")
    d = _sq_dists(frames.astype(np.float64), codebook.centroids.astype(np.float64))
    return d.argmin(axis=1).astype(np.int64)
