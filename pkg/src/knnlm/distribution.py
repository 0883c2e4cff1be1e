"""Turning retrieved neighbors into next-token probabilities.

The neighbor distribution puts mass exp(-distance) on each retrieved record's
value token (times the record weight in the weighted form), normalized over
the retrieved tokens only. Computation shifts by the minimum distance before
exponentiating, so the result is invariant to adding a constant to all
distances and never overflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .index import NeighborHit


@dataclass(frozen=True)
class SparseDist:
    """Probabilities over the retrieved tokens only; strictly positive, sums to 1."""

    probs: dict[int, float]

    def get(self, token: int) -> float:
        return self.probs.get(token, 0.0)

    def support(self) -> set[int]:
        return set(self.probs)

    def total(self) -> float:
        return float(sum(self.probs.values()))


def _aggregate(hits: list[NeighborHit], weights: np.ndarray) -> SparseDist:
    d = np.asarray([h.distance for h in hits], dtype=np.float64)
    shifted = np.exp(-(d - d.min()))
    mass = weights * shifted
    sums: dict[int, float] = {}
    for h, m in zip(hits, mass):
        if m > 0.0:
            sums[h.value] = sums.get(h.value, 0.0) + float(m)
    total = sum(sums.values())
    return SparseDist(probs={tok: m / total for tok, m in sums.items()})


def knn_distribution(hits: list[NeighborHit]) -> SparseDist:
    """Unweighted neighbor distribution: p(y) proportional to sum of exp(-d) over hits with value y."""
    if not hits:
        raise InvalidInputError("cannot form a neighbor distribution from zero hits")
    return _aggregate(hits, np.ones(len(hits), dtype=np.float64))


def weighted_knn_distribution(hits: list[NeighborHit]) -> SparseDist:
    """Weighted form: each hit contributes weight * exp(-d). Reduces to the
    unweighted distribution when every weight is 1."""
    if not hits:
        raise InvalidInputError("cannot form a neighbor distribution from zero hits")
    w = np.asarray([h.weight for h in hits], dtype=np.float64)
    if np.any(w < 0.0):
        raise InvalidInputError("hit weights must be non-negative")
    if not np.any(w > 0.0):
        raise InvalidInputError("all hit weights are zero")
    return _aggregate(hits, w)


def interpolate(p_knn: SparseDist, p_nlm: np.ndarray, lam: float) -> np.ndarray:
    """Convex mixture lam * p_knn + (1 - lam) * p_nlm over the full vocabulary.

    Unretrieved tokens take probability 0 from the neighbor side, so at
    lam = 1 the output is exactly the neighbor distribution scattered into a
    dense vector.
    """
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"interpolation weight must be in [0, 1], got {lam}")
    out = (1.0 - lam) * np.asarray(p_nlm, dtype=np.float64)
    for tok, p in p_knn.probs.items():
        out[tok] += lam * p
    return out


def interpolated_log_prob(pk: float, pn: float, lam: float, floor: float = -50.0) -> float:
    """log(lam * pk + (1 - lam) * pn) with a reporting floor for zero mass.

    The floor only engages when the mixture assigns exactly zero (lam = 1 and
    the target was never retrieved); the smoothed base LM keeps every other
    mixture strictly positive.
    """
    p = lam * pk + (1.0 - lam) * pn
    if p <= 0.0:
        return floor
    return max(float(np.log(p)), floor)


def rescale_distances(hits: list[NeighborHit], power: float) -> list[NeighborHit]:
    """Reinterpret the index's squared-L2 distances as L2^power before exp(-d).

    power = 2 (the default) consumes the squared distances as-is; power = 1
    takes their square root.
    """
    if power == 2.0:
        return hits
    return [
        NeighborHit(h.id, float(h.distance ** (power / 2.0)), h.value, h.weight) for h in hits
    ]
