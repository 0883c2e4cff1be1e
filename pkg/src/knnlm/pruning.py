"""Datastore pruning: shrink the record count while keeping retrieval useful.

Four strategies, all deterministic given their seed:

* random    — uniform sample of records, weights untouched.
* kmeans    — token-conditioned clustering: the most frequent target tokens
              have their keys clustered separately; each cluster collapses to
              (centroid, token, summed weight). Other records pass through.
* gm        — greedy merging: scan records in id order; absorb same-token
              unmerged neighbors among each record's K nearest, incrementing
              the absorber's weight. Purely local, conserves total weight.
* rank      — drop the records that are rarely retrieved, ranked by an
              importance score g = sum of 1/rank over a query workload.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datastore import Datastore
from .errors import InvalidInputError
from .kmeans import lloyd


@dataclass
class PruneReport:
    method: str
    input_count: int
    output_count: int
    retention: float
    weight_before: float
    weight_after: float
    wall_s: float
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "input_count": self.input_count,
            "output_count": self.output_count,
            "retention": self.retention,
            "weight_before": self.weight_before,
            "weight_after": self.weight_after,
            "wall_s": self.wall_s,
            **{f"param_{k}": v for k, v in self.params.items()},
        }


def _ceil_count(fraction: float, n: int) -> int:
    return int(np.ceil(fraction * n - 1e-9))


def random_prune(ds: Datastore, retain_fraction: float, seed: int = 0) -> Datastore:
    """Keep a uniform, order-preserving sample of ceil(fraction * N) records."""
    if not 0.0 < retain_fraction <= 1.0:
        raise InvalidInputError(f"retain fraction must be in (0, 1], got {retain_fraction}")
    n = len(ds)
    q = _ceil_count(retain_fraction, n)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=q, replace=False))
    return ds.with_records(
        keys=ds.keys[keep],
        values=ds.values[keep],
        weights=ds.weights[keep],
        note=f"random_prune(retain={retain_fraction},seed={seed})",
    )


def kmeans_prune(ds: Datastore, top_m_tokens: int, cluster_ratio: float, seed: int = 0) -> Datastore:
    """Cluster the keys of each frequent target token; keep weighted centroids.

    For each of the `top_m_tokens` most frequent values (ties to the lower
    token id), k-means with k = max(1, ceil(ratio * count)) replaces that
    token's records by (centroid, token, summed member weight) triples. All
    other records pass through untouched, so total weight is conserved
    exactly.
    """
    if top_m_tokens < 0:
        raise InvalidInputError(f"top_m_tokens must be >= 0, got {top_m_tokens}")
    if not 0.0 < cluster_ratio <= 1.0:
        raise InvalidInputError(f"cluster ratio must be in (0, 1], got {cluster_ratio}")
    if top_m_tokens == 0:
        return ds.with_records(
            keys=ds.keys, values=ds.values, weights=ds.weights,
            note=f"kmeans_prune(top_m=0,ratio={cluster_ratio},seed={seed})",
        )
    counts = np.bincount(ds.values)
    tokens = np.flatnonzero(counts)
    ranked = tokens[np.lexsort((tokens, -counts[tokens]))]
    clustered_tokens = set(int(t) for t in ranked[:top_m_tokens])

    pass_mask = ~np.isin(ds.values, list(clustered_tokens))
    out_keys = [ds.keys[pass_mask]]
    out_values = [ds.values[pass_mask]]
    out_weights = [ds.weights[pass_mask]]

    for tok in ranked[:top_m_tokens]:
        tok = int(tok)
        members = np.flatnonzero(ds.values == tok)
        cnt = members.shape[0]
        k = max(1, _ceil_count(cluster_ratio, cnt))
        if k >= cnt:
            # every record its own cluster: keep the originals bit-for-bit
            out_keys.append(ds.keys[members])
            out_values.append(ds.values[members])
            out_weights.append(ds.weights[members])
            continue
        centroids, labels = lloyd(ds.keys[members], k, seed=seed + tok)
        wsums = np.bincount(labels, weights=ds.weights[members].astype(np.float64), minlength=k)
        keep = wsums > 0.0
        out_keys.append(centroids[keep])
        out_values.append(np.full(int(keep.sum()), tok, dtype=np.int64))
        out_weights.append(wsums[keep].astype(np.float32))

    return ds.with_records(
        keys=np.concatenate(out_keys, axis=0),
        values=np.concatenate(out_values),
        weights=np.concatenate(out_weights),
        note=f"kmeans_prune(top_m={top_m_tokens},ratio={cluster_ratio},seed={seed})",
    )


def greedy_merge(ds: Datastore, searcher, k_neighbors: int) -> Datastore:
    """Scan-order merging of same-token nearest neighbors into weighted records.

    Every record starts with weight 1. Visiting records in id order, each
    still-live record absorbs any of its K nearest neighbors that is a
    different record, shares its value token, and still has weight exactly 1;
    absorption moves one unit of weight. Records whose weight reached 0 are
    dropped, so the total weight equals the input count exactly. Neighbor
    lists come from the supplied searcher over the *original* keys, so the
    scan order only affects which record absorbs, never what is retrievable.
    """
    if k_neighbors < 2:
        raise InvalidInputError(f"neighbor count must be >= 2, got {k_neighbors}")
    if not np.all(ds.weights == 1.0):
        raise InvalidInputError("greedy merge expects a fresh datastore with unit weights")
    n = len(ds)
    ids, _ = searcher.search_batch(ds.keys, min(k_neighbors, n))
    neighbor_rows = ids.tolist()
    values = ds.values.tolist()
    s = [1] * n
    for i in range(n):
        if s[i] == 0:
            continue
        vi = values[i]
        for t in neighbor_rows[i]:
            if t < 0 or t == i:
                continue
            if s[t] == 1 and values[t] == vi:
                s[i] += 1
                s[t] = 0
    weights = np.asarray(s, dtype=np.float32)
    keep = np.flatnonzero(weights > 0)
    return ds.with_records(
        keys=ds.keys[keep],
        values=ds.values[keep],
        weights=weights[keep],
        note=f"greedy_merge(k={k_neighbors})",
    )


def importance_scores(
    ds: Datastore,
    searcher,
    queries: np.ndarray,
    k: int,
    exclude_ids: np.ndarray | None = None,
) -> np.ndarray:
    """Per-record score g = sum over queries of 1/rank among retrieved neighbors.

    Records absent from a query's result list contribute nothing for it.
    When the queries are the datastore's own source contexts, pass
    `exclude_ids` (the record id each query originates from) so a record's
    zero-distance self-hit does not inflate its own score.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    queries = np.asarray(queries, dtype=np.float32)
    if exclude_ids is not None and len(exclude_ids) != queries.shape[0]:
        raise InvalidInputError("exclude_ids length must match the query count")
    scores = np.zeros(len(ds), dtype=np.float64)
    for j in range(queries.shape[0]):
        hits = searcher.search(queries[j], k)
        skip = int(exclude_ids[j]) if exclude_ids is not None else -1
        for rank, h in enumerate(hits, start=1):
            if h.id == skip:
                continue
            scores[h.id] += 1.0 / rank
    return scores


def rank_prune(ds: Datastore, scores: np.ndarray, retain_fraction: float) -> Datastore:
    """Keep the ceil(fraction * N) highest-scoring records (ties to lower id)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != len(ds):
        raise InvalidInputError(f"got {scores.shape[0]} scores for {len(ds)} records")
    if not 0.0 < retain_fraction <= 1.0:
        raise InvalidInputError(f"retain fraction must be in (0, 1], got {retain_fraction}")
    n = len(ds)
    q = _ceil_count(retain_fraction, n)
    order = np.lexsort((np.arange(n), -scores))
    keep = np.sort(order[:q])
    return ds.with_records(
        keys=ds.keys[keep],
        values=ds.values[keep],
        weights=ds.weights[keep],
        note=f"rank_prune(retain={retain_fraction})",
    )


def run_prune(ds: Datastore, method: str, **params) -> tuple[Datastore, PruneReport]:
    """Dispatch one pruning run and time it into a report."""
    t0 = time.perf_counter()
    if method == "random":
        out = random_prune(ds, params["retain_fraction"], params.get("seed", 0))
    elif method == "kmeans":
        out = kmeans_prune(ds, params["top_m_tokens"], params["cluster_ratio"], params.get("seed", 0))
    elif method == "gm":
        out = greedy_merge(ds, params["searcher"], params["k_neighbors"])
    elif method == "rank":
        out = rank_prune(ds, params["scores"], params["retain_fraction"])
    else:
        raise InvalidInputError(f"unknown pruning method {method!r}")
    wall = time.perf_counter() - t0
    report = PruneReport(
        method=method,
        input_count=len(ds),
        output_count=len(out),
        retention=len(out) / len(ds),
        weight_before=ds.total_weight(),
        weight_after=out.total_weight(),
        wall_s=wall,
        params={k: v for k, v in params.items() if isinstance(v, (int, float, str))},
    )
    return out, report
