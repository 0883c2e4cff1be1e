"""Lloyd's k-means with k-means++ seeding.

Shared by the inverted-file coarse quantizer, the product-quantizer codebook
training, and token-conditioned datastore clustering. Runs until the
assignment reaches a fixpoint or `max_iters` passes; empty clusters are
re-seeded from the farthest member of the largest cluster, so every returned
centroid owns at least one point.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

_BLOCK = 16384


def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared L2 distances, (n, k), computed blockwise in float32."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    c = np.ascontiguousarray(centroids, dtype=np.float32)
    x2 = np.einsum("nd,nd->n", x, x)
    c2 = np.einsum("kd,kd->k", c, c)
    out = np.empty((x.shape[0], c.shape[0]), dtype=np.float32)
    for lo in range(0, x.shape[0], _BLOCK):
        hi = min(lo + _BLOCK, x.shape[0])
        blk = x2[lo:hi, None] + c2[None, :] - 2.0 * (x[lo:hi] @ c.T)
        np.maximum(blk, 0.0, out=blk)
        out[lo:hi] = blk
    return out


def assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid for each row of x."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    c = np.ascontiguousarray(centroids, dtype=np.float32)
    c2 = np.einsum("kd,kd->k", c, c)
    labels = np.empty(x.shape[0], dtype=np.int64)
    for lo in range(0, x.shape[0], _BLOCK):
        hi = min(lo + _BLOCK, x.shape[0])
        blk = c2[None, :] - 2.0 * (x[lo:hi] @ c.T)
        labels[lo:hi] = np.argmin(blk, axis=1)
    return labels


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared-distance sampling."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float32)
    first = int(rng.integers(0, n))
    centroids[0] = x[first]
    d2 = np.einsum("nd,nd->n", x - centroids[0], x - centroids[0]).astype(np.float64)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # remaining points coincide with chosen centroids; any pick works
            nxt = int(rng.integers(0, n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centroids[i] = x[nxt]
        diff = x - centroids[i]
        np.minimum(d2, np.einsum("nd,nd->n", diff, diff), out=d2)
    return centroids


def lloyd(
    x: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 25,
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster rows of x into k groups; returns (centroids (k, d) f32, labels (n,))."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    n = x.shape[0]
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if k > n:
        raise InvalidInputError(f"k = {k} exceeds the number of points {n}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    labels = assign(x, centroids)
    for _ in range(max_iters):
        sums = np.zeros((k, x.shape[1]), dtype=np.float64)
        for j in range(x.shape[1]):
            sums[:, j] = np.bincount(labels, weights=x[:, j], minlength=k)
        sizes = np.bincount(labels, minlength=k)
        nonempty = sizes > 0
        centroids[nonempty] = (sums[nonempty] / sizes[nonempty, None]).astype(np.float32)
        for empty in np.flatnonzero(~nonempty):
            big = int(np.argmax(sizes))
            members = np.flatnonzero(labels == big)
            diff = x[members] - centroids[big]
            far = members[int(np.argmax(np.einsum("nd,nd->n", diff, diff)))]
            centroids[empty] = x[far]
            labels[far] = empty
            sizes[big] -= 1
            sizes[empty] += 1
        new_labels = assign(x, centroids)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return centroids, labels
