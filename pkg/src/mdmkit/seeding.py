"""Synthetic-set initialization by selecting representative real pairs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import EmbeddingPairSet, SyntheticSet
from .errors import DataError, SizeError
from .numerics import Rng, as_matrix

METHODS = ("kmeans_joint", "kcenter", "herding", "random")


@dataclass
class SeedSelection:
    method: str
    indices: np.ndarray
    objective: float
    history: list = field(default_factory=list)  # Lloyd objective per iteration (k-means only)


def _check_k(n: int, k: int) -> None:
    if k < 1:
        raise SizeError("K must be >= 1")
    if k > n:
        raise SizeError(f"K={k} exceeds the number of rows N={n}")


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def quantization_error(feats, indices) -> float:
    """Sum over rows of the squared distance to the nearest selected row."""
    x = as_matrix(feats)
    return float(_sq_dists(x, x[np.asarray(indices)]).min(axis=1).sum())


def _kmeans_pp(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(0, n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            probs = closest / total
            nxt = int(np.searchsorted(np.cumsum(probs), rng.uniform() * probs.sum(), side="right"))
            nxt = min(nxt, n - 1)
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(0, free.size)])
        if nxt in chosen:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[np.argmax(closest[free])])
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def _reseed_empty(x, centroids, labels, d2_assigned, counts):
    """Move each empty centroid onto a distinct point far from its own centroid."""
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return centroids
    order = np.argsort(-d2_assigned, kind="stable")
    for c, idx in zip(empty, order):
        centroids[c] = x[idx]
    return centroids


def kmeans_joint(joint_feats, k: int, rng: Rng, max_iter: int = 100,
                 tol: float = 1e-4) -> SeedSelection:
    """Lloyd's k-means (k-means++ seeding) then, per cluster, the member with
    the highest cosine similarity to its centroid (lowest index on ties).
    Returned indices are sorted ascending."""
    x = as_matrix(joint_feats)
    n = x.shape[0]
    _check_k(n, k)
    centroids = _kmeans_pp(x, k, rng)
    history = []
    prev = np.inf
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(axis=1)
        d2_assigned = d2[np.arange(n), labels]
        obj = float(d2_assigned.sum())
        history.append(obj)
        if np.isfinite(prev) and prev - obj <= tol * prev:
            break
        prev = obj
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts):
            centroids[c] = x[labels == c].mean(axis=0)
        centroids = _reseed_empty(x, centroids, labels, d2_assigned, counts)

    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-300)
    selected = []
    taken = np.zeros(n, dtype=bool)
    for c in range(k):
        members = np.flatnonzero(labels == c)
        if members.size:
            cn = centroids[c] / max(np.linalg.norm(centroids[c]), 1e-300)
            best = int(members[np.argmax(xn[members] @ cn)])
        else:
            best = -1
        if best < 0 or taken[best]:
            # empty after the final assignment: farthest still-unselected point
            far = d2[np.arange(n), labels].copy()
            far[taken] = -1.0
            best = int(np.argmax(far))
        taken[best] = True
        selected.append(best)
    indices = np.sort(np.array(selected, dtype=np.int64))
    return SeedSelection("kmeans_joint", indices, quantization_error(x, indices), history)


def kcenter(feats, k: int, rng: Rng) -> SeedSelection:
    """Greedy farthest-first traversal from a uniformly random first center."""
    x = as_matrix(feats)
    n = x.shape[0]
    _check_k(n, k)
    first = int(rng.integers(0, n))
    selected = [first]
    mind = np.sqrt(_sq_dists(x, x[[first]])[:, 0])
    mind[first] = -1.0
    for _ in range(1, k):
        nxt = int(np.argmax(mind))
        selected.append(nxt)
        mind = np.minimum(mind, np.sqrt(_sq_dists(x, x[[nxt]])[:, 0]))
        mind[selected] = -1.0
    indices = np.array(selected, dtype=np.int64)
    return SeedSelection("kcenter", indices, quantization_error(x, indices))


def herding(feats, k: int) -> SeedSelection:
    """Greedy selection keeping the running sum closest to ``(t+1) * mean``."""
    x = as_matrix(feats)
    n = x.shape[0]
    _check_k(n, k)
    mu = x.mean(axis=0)
    running = np.zeros_like(mu)
    avail = np.ones(n, dtype=bool)
    selected = []
    for t in range(k):
        target = (t + 1) * mu
        dist = np.linalg.norm(running[None, :] + x - target[None, :], axis=1)
        dist[~avail] = np.inf
        best = int(np.argmin(dist))
        selected.append(best)
        avail[best] = False
        running = running + x[best]
    indices = np.array(selected, dtype=np.int64)
    return SeedSelection("herding", indices, quantization_error(x, indices))


def random_selection(feats, k: int, rng: Rng) -> SeedSelection:
    x = as_matrix(feats)
    _check_k(x.shape[0], k)
    indices = np.asarray(rng.choice(x.shape[0], k, replace=False), dtype=np.int64)
    return SeedSelection("random", indices, quantization_error(x, indices))


def select(method: str, feats, k: int, rng: Rng) -> SeedSelection:
    method = method.replace("-", "_")
    if method == "kmeans_joint":
        return kmeans_joint(feats, k, rng)
    if method == "kcenter":
        return kcenter(feats, k, rng)
    if method == "herding":
        return herding(feats, k)
    if method == "random":
        return random_selection(feats, k, rng)
    raise ValueError(f"unknown seeding method {method!r}; expected one of {METHODS}")


def build_synthetic(selection: SeedSelection, data: EmbeddingPairSet) -> SyntheticSet:
    idx = np.asarray(selection.indices)
    if idx.size and (idx.min() < 0 or idx.max() >= data.n):
        raise DataError(f"selection index out of range for N={data.n}")
    return SyntheticSet(data.image[idx].copy(), data.text[idx].copy())
