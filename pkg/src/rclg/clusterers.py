"""Hard clustering (k-means++, spectral) used to seed prototypes and to read out clusters."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndcore as nd

log = logging.getLogger(__name__)

KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 300


@dataclass
class ClusterCenters:
    centers: np.ndarray
    source: str
    epoch_of_refresh: int = 0


@dataclass
class Assignment:
    y: np.ndarray
    inertia: float


def _sq_dists(z: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (z * z).sum(1)[:, None] - 2.0 * z @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(z)
    centers = [z[rng.integers(n)]]
    closest = _sq_dists(z, centers[0][None]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(z[idx])
        closest = np.minimum(closest, _sq_dists(z, z[idx][None]).ravel())
    return np.array(centers)


def lloyd(z: np.ndarray, centers: np.ndarray, history: list | None = None):
    """Lloyd iterations from the given centers; returns (centers, labels, inertia)."""
    k = len(centers)
    centers = centers.copy()
    for _ in range(KMEANS_MAX_ITER):
        d = _sq_dists(z, centers)
        labels = d.argmin(axis=1)
        if history is not None:
            history.append(float(d[np.arange(len(z)), labels].sum()))
        new = centers.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = z[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point farthest from its own center
            own = _sq_dists(z, new)[np.arange(len(z)), labels]
            far = int(own.argmax())
            new[j] = z[far]
            labels[far] = j
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < KMEANS_TOL:
            break
    d = _sq_dists(z, centers)
    labels = d.argmin(axis=1)
    return centers, labels, float(d[np.arange(len(z)), labels].sum())


def kmeans(z, k: int, rng: np.random.Generator, restarts: int = 10):
    z = np.asarray(z.values if isinstance(z, nd.Tensor) else z, dtype=np.float64)
    if len(z) < k:
        raise ValueError(f"kmeans needs at least k={k} points, got {len(z)}")
    best = None
    for _ in range(restarts):
        c, y, inertia = lloyd(z, _kmeans_pp(z, k, rng))
        # strict < keeps the lowest restart index on ties
        if best is None or inertia < best[2]:
            best = (c, y, inertia)
    c, y, inertia = best
    return ClusterCenters(c, "kmeans"), Assignment(y, inertia)


def spectral_cluster(z, k: int, rng: np.random.Generator, restarts: int = 10):
    """Normalised spectral clustering on the clamped cosine affinity of the rows of z."""
    z = np.asarray(z.values if isinstance(z, nd.Tensor) else z, dtype=np.float64)
    n = len(z)
    if n < k:
        raise ValueError(f"spectral clustering needs at least k={k} points, got {n}")
    if k == 1:
        y = np.zeros(n, dtype=np.int64)
        c = z.mean(axis=0, keepdims=True)
        return ClusterCenters(c, "spectral"), Assignment(y, float(((z - c) ** 2).sum()))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    unit = z / np.where(norms == 0, 1.0, norms)
    w = np.clip(unit @ unit.T, 0.0, None)
    deg = w.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0))
    lap = np.eye(n) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    try:
        _, vecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError:
        log.warning("spectral_cluster: eigensolver failed, falling back to kmeans")
        return kmeans(z, k, rng, restarts)
    emb = vecs[:, :k]
    emb = emb / np.where((rn := np.linalg.norm(emb, axis=1, keepdims=True)) == 0, 1.0, rn)
    _, assign = kmeans(emb, k, rng, restarts)
    y = assign.y
    centers = np.zeros((k, z.shape[1]))
    for j in range(k):
        members = z[y == j]
        centers[j] = members.mean(axis=0) if len(members) else z[rng.integers(n)]
    inertia = float(((z - centers[y]) ** 2).sum())
    return ClusterCenters(centers, "spectral"), Assignment(y, inertia)


CLUSTERERS = {"kmeans": kmeans, "spectral": spectral_cluster}


def refresh_due(epoch: int, T: int) -> bool:
    return epoch % T == 0


def refresh_centers(states, params, hp, epoch: int, algo: str, rng: nd.RngStream) -> None:
    """Re-seed each view's prototypes from a hard clustering of its Z_L (in place)."""
    clusterer = CLUSTERERS[algo]
    for view, state in zip((1, 2), states):
        result, _ = clusterer(state.Z_L.values, hp.k, rng.generator(epoch, view))
        params[f"C{view}"] = result.centers


def final_assignment(states, hp, rng: nd.RngStream, restarts: int = 10, key: int = 0) -> Assignment:
    """k-means on the view-averaged fused embedding."""
    z = (states[0].Z_G.values + states[1].Z_G.values) / 2.0
    _, assign = kmeans(z, hp.k, rng.generator(key), restarts)
    return assign
