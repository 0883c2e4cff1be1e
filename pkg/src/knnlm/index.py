"""Exact and approximate nearest-neighbor search over datastore keys.

`flat_search` is the exact squared-L2 oracle. `IvfIndex` partitions the keys
with a coarse k-means quantizer and scans only the `nprobe` nearest inverted
lists; with a `PqCodebook` attached, candidate distances come from per-subspace
codeword tables instead of the raw keys (asymmetric distances — the query side
stays full precision). Ties break toward the lower record id everywhere.

File format ("KNNI", little-endian):
    magic | version u32 | dim u32 | nlist u32 | m u32 (0 = no PQ) | bits u32
    count u64 | centroids f32[nlist*dim] | offsets u64[nlist+1] | ids u32[count]
    if m > 0: codewords f32[m * 2^bits * dim/m] | codes u8[count*m]
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import Reader, Writer
from .datastore import Datastore
from .errors import FormatError, InvalidInputError
from .kmeans import lloyd, squared_distances

MAGIC = b"KNNI"
VERSION = 1
DEFAULT_MAX_ITERS = 25


@dataclass
class NeighborHit:
    id: int
    distance: float  # squared L2; approximate when PQ is active
    value: int
    weight: float


def default_nlist(n: int) -> int:
    """Heuristic coarse-list count: 4 * sqrt(N), at least 1, at most N."""
    return max(1, min(n, round(4.0 * math.sqrt(n))))


def default_nprobe(nlist: int) -> int:
    return min(32, nlist)


# --- exact search ----------------------------------------------------------

def flat_search(ds: Datastore, query: np.ndarray, k: int) -> list[NeighborHit]:
    """Exhaustive exact search; returns min(k, N) hits sorted by (distance, id)."""
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != ds.dim:
        raise InvalidInputError(f"query dim {q.shape[0]} != datastore dim {ds.dim}")
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    diff = ds.keys.astype(np.float64) - q
    d = np.einsum("nd,nd->n", diff, diff)
    order = np.argsort(d, kind="stable")[: min(k, len(ds))]
    return [
        NeighborHit(int(i), float(d[i]), int(ds.values[i]), float(ds.weights[i])) for i in order
    ]


def _top_k_with_ties(dists: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest distances, ties resolved by lower id."""
    n = dists.shape[0]
    if k >= n:
        return np.lexsort((ids, dists))
    part = np.argpartition(dists, k - 1)
    thresh = dists[part[k - 1]]
    cand = np.flatnonzero(dists <= thresh)
    cand = cand[np.lexsort((ids[cand], dists[cand]))]
    return cand[:k]


# --- product quantization --------------------------------------------------

@dataclass
class PqCodebook:
    """Per-subspace codeword tables: m subspaces of dim/m, 2^bits codewords each."""

    codewords: np.ndarray  # (m, 2^bits, dsub) float32

    @property
    def m(self) -> int:
        return self.codewords.shape[0]

    @property
    def n_codes(self) -> int:
        return self.codewords.shape[1]

    @property
    def dsub(self) -> int:
        return self.codewords.shape[2]

    @property
    def bits(self) -> int:
        return int(round(math.log2(self.n_codes)))

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Map rows of x to (n, m) uint8 codes (nearest codeword per subspace)."""
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 1
        mat = x[None, :] if single else x
        codes = np.empty((mat.shape[0], self.m), dtype=np.uint8)
        for j in range(self.m):
            sub = mat[:, j * self.dsub : (j + 1) * self.dsub]
            d = squared_distances(sub, self.codewords[j])
            codes[:, j] = np.argmin(d, axis=1)
        return codes[0] if single else codes

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        single = codes.ndim == 1
        mat = codes[None, :] if single else codes
        out = np.empty((mat.shape[0], self.m * self.dsub), dtype=np.float32)
        for j in range(self.m):
            out[:, j * self.dsub : (j + 1) * self.dsub] = self.codewords[j][mat[:, j]]
        return out[0] if single else out

    def distance_table(self, query: np.ndarray) -> np.ndarray:
        """(m, 2^bits) table of squared distances from query sub-vectors to codewords."""
        q = np.asarray(query, dtype=np.float32).ravel()
        tab = np.empty((self.m, self.n_codes), dtype=np.float32)
        for j in range(self.m):
            diff = self.codewords[j] - q[j * self.dsub : (j + 1) * self.dsub]
            tab[j] = np.einsum("cd,cd->c", diff, diff)
        return tab


def train_pq(keys: np.ndarray, m: int, bits: int, seed: int = 0, max_iters: int = DEFAULT_MAX_ITERS) -> PqCodebook:
    """Train per-subspace k-means codebooks over the key matrix."""
    keys = np.asarray(keys, dtype=np.float32)
    d = keys.shape[1]
    if d % m != 0:
        raise InvalidInputError(f"key dim {d} not divisible by m = {m}")
    if bits not in (4, 8):
        raise InvalidInputError(f"bits must be 4 or 8, got {bits}")
    n_codes = 1 << bits
    if keys.shape[0] < n_codes:
        raise InvalidInputError(f"need at least {n_codes} keys to train {bits}-bit codebooks")
    dsub = d // m
    codewords = np.empty((m, n_codes, dsub), dtype=np.float32)
    for j in range(m):
        sub = np.ascontiguousarray(keys[:, j * dsub : (j + 1) * dsub])
        centroids, _ = lloyd(sub, n_codes, seed=seed + j, max_iters=max_iters)
        codewords[j] = centroids
    return PqCodebook(codewords=codewords)


def pq_distance(codebook: PqCodebook, code: np.ndarray, query: np.ndarray) -> float:
    """Asymmetric approximate squared L2 between a query and one encoded record."""
    tab = codebook.distance_table(query)
    code = np.asarray(code)
    return float(tab[np.arange(codebook.m), code].sum(dtype=np.float64))


# --- inverted-file index ---------------------------------------------------

@dataclass
class IvfIndex:
    centroids: np.ndarray  # (nlist, d) float32
    lists: list[np.ndarray]  # record ids (uint32) per inverted list
    pq: PqCodebook | None = None
    codes: np.ndarray | None = None  # (N, m) uint8, row-aligned with record ids

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def list_sizes(self) -> np.ndarray:
        return np.asarray([len(l) for l in self.lists], dtype=np.int64)


def train_ivf(
    keys: np.ndarray,
    nlist: int,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    train_sample: int = 0,
) -> IvfIndex:
    """Cluster keys into nlist coarse cells and build the inverted lists.

    `train_sample` > 0 runs Lloyd iterations on a uniform subsample of that
    size (all keys are still assigned to lists afterwards); 0 trains on
    everything.
    """
    keys = np.ascontiguousarray(keys, dtype=np.float32)
    n = keys.shape[0]
    if nlist < 1 or nlist > n:
        raise InvalidInputError(f"nlist must be in [1, {n}], got {nlist}")
    if train_sample and train_sample < n and train_sample >= nlist:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=train_sample, replace=False))
        centroids, _ = lloyd(keys[idx], nlist, seed=seed, max_iters=max_iters)
        from .kmeans import assign

        labels = assign(keys, centroids)
    else:
        centroids, labels = lloyd(keys, nlist, seed=seed, max_iters=max_iters)
    lists = [np.flatnonzero(labels == c).astype(np.uint32) for c in range(nlist)]
    return IvfIndex(centroids=centroids, lists=lists)


def attach_pq(index: IvfIndex, keys: np.ndarray, m: int, bits: int, seed: int = 0) -> IvfIndex:
    """Train a PQ codebook on the keys and store per-record codes on the index."""
    pq = train_pq(keys, m=m, bits=bits, seed=seed)
    index.pq = pq
    index.codes = pq.encode(keys)
    return index


def _probe_order(index: IvfIndex, q32: np.ndarray, nprobe: int) -> np.ndarray:
    diff = index.centroids.astype(np.float64) - q32.astype(np.float64)
    cd = np.einsum("nd,nd->n", diff, diff)
    order = np.lexsort((np.arange(index.nlist), cd))
    return order[:nprobe]


def ivf_search(index: IvfIndex, ds: Datastore, query: np.ndarray, k: int, nprobe: int) -> list[NeighborHit]:
    """Search the nprobe nearest inverted lists; exact distances unless PQ is attached."""
    q = np.asarray(query, dtype=np.float32).ravel()
    if q.shape[0] != index.dim or index.dim != ds.dim:
        raise InvalidInputError(
            f"dimension mismatch: query {q.shape[0]}, index {index.dim}, datastore {ds.dim}"
        )
    if not 1 <= nprobe <= index.nlist:
        raise InvalidInputError(f"nprobe must be in [1, {index.nlist}], got {nprobe}")
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    probes = _probe_order(index, q, nprobe)
    cand = (
        np.concatenate([index.lists[c] for c in probes])
        if len(probes)
        else np.empty(0, dtype=np.uint32)
    )
    if cand.size == 0:
        return []
    cand = cand.astype(np.int64)
    if index.pq is not None:
        tab = index.pq.distance_table(q)
        codes = index.codes[cand]
        d = np.zeros(cand.shape[0], dtype=np.float64)
        for j in range(index.pq.m):
            d += tab[j][codes[:, j]]
    else:
        diff = ds.keys[cand].astype(np.float64) - q.astype(np.float64)
        d = np.einsum("nd,nd->n", diff, diff)
    keep = _top_k_with_ties(d, cand, min(k, cand.shape[0]))
    return [
        NeighborHit(int(cand[i]), float(d[i]), int(ds.values[cand[i]]), float(ds.weights[cand[i]]))
        for i in keep
    ]


# --- searcher facades (instrumented) ----------------------------------------

class FlatSearcher:
    """Exact searcher over one datastore, with a served-query counter."""

    def __init__(self, ds: Datastore):
        self.ds = ds
        self.queries_served = 0

    def search(self, query: np.ndarray, k: int) -> list[NeighborHit]:
        self.queries_served += 1
        return flat_search(self.ds, query, k)

    def search_batch(self, queries: np.ndarray, k: int, block: int = 2048) -> tuple[np.ndarray, np.ndarray]:
        """All-queries k-NN: returns (ids, dists) as (B, k') arrays, k' = min(k, N).

        Distances are float32 (blocked matmul); rows padded with -1 never occur
        since k' <= N. Tie order matches `flat_search` up to float32 rounding.
        """
        qs = np.ascontiguousarray(queries, dtype=np.float32)
        self.queries_served += qs.shape[0]
        keys = self.ds.keys
        n = keys.shape[0]
        kk = min(k, n)
        x2 = np.einsum("nd,nd->n", keys, keys)
        ids_arr = np.arange(n, dtype=np.int64)
        out_ids = np.empty((qs.shape[0], kk), dtype=np.int64)
        out_d = np.empty((qs.shape[0], kk), dtype=np.float32)
        for lo in range(0, qs.shape[0], block):
            hi = min(lo + block, qs.shape[0])
            blk = qs[lo:hi]
            q2 = np.einsum("bd,bd->b", blk, blk)
            d = q2[:, None] + x2[None, :] - 2.0 * (blk @ keys.T)
            np.maximum(d, 0.0, out=d)
            for r in range(d.shape[0]):
                sel = _top_k_with_ties(d[r].astype(np.float64), ids_arr, kk)
                out_ids[lo + r] = sel
                out_d[lo + r] = d[r][sel]
        return out_ids, out_d


class IvfSearcher:
    """IVF searcher facade binding index + datastore + default nprobe."""

    def __init__(self, index: IvfIndex, ds: Datastore, nprobe: int | None = None):
        self.index = index
        self.ds = ds
        self.nprobe = default_nprobe(index.nlist) if nprobe is None else nprobe
        self.queries_served = 0

    def search(self, query: np.ndarray, k: int, nprobe: int | None = None) -> list[NeighborHit]:
        self.queries_served += 1
        return ivf_search(self.index, self.ds, query, k, self.nprobe if nprobe is None else nprobe)

    def search_batch(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        qs = np.ascontiguousarray(queries, dtype=np.float32)
        n = qs.shape[0]
        kk = min(k, len(self.ds))
        out_ids = np.full((n, kk), -1, dtype=np.int64)
        out_d = np.full((n, kk), np.inf, dtype=np.float32)
        for i in range(n):
            hits = self.search(qs[i], kk)
            for j, h in enumerate(hits):
                out_ids[i, j] = h.id
                out_d[i, j] = h.distance
        return out_ids, out_d


def recall_at(oracle_hits: list[NeighborHit], test_hits: list[NeighborHit]) -> float:
    """Fraction of the oracle's neighbor ids recovered by the test result."""
    if not oracle_hits:
        return 1.0
    oracle = {h.id for h in oracle_hits}
    got = {h.id for h in test_hits}
    return len(oracle & got) / len(oracle)


# --- serialization ----------------------------------------------------------

def save_index(index: IvfIndex, path: str | Path) -> None:
    w = Writer()
    w.magic(MAGIC)
    w.u32(VERSION)
    w.u32(index.dim)
    w.u32(index.nlist)
    w.u32(index.pq.m if index.pq is not None else 0)
    w.u32(index.pq.bits if index.pq is not None else 0)
    sizes = index.list_sizes()
    count = int(sizes.sum())
    w.u64(count)
    w.array(index.centroids, "<f4")
    offsets = np.zeros(index.nlist + 1, dtype=np.uint64)
    np.cumsum(sizes, out=offsets[1:])
    w.array(offsets, "<u8")
    if count:
        w.array(np.concatenate(index.lists), "<u4")
    if index.pq is not None:
        w.array(index.pq.codewords, "<f4")
        w.array(index.codes, "u1")
    Path(path).write_bytes(w.getvalue())


def load_index(path: str | Path) -> IvfIndex:
    buf = Path(path).read_bytes()
    r = Reader(buf, name=str(path))
    r.expect_magic(MAGIC)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", 4)
    dim = r.u32("dim")
    nlist = r.u32("nlist")
    m = r.u32("pq m")
    bits = r.u32("pq bits")
    count = r.u64("id count")
    centroids = r.array("<f4", nlist * dim, "centroids").reshape(nlist, dim)
    offsets = r.array("<u8", nlist + 1, "list offsets").astype(np.int64)
    ids = r.array("<u4", count, "record ids") if count else np.empty(0, dtype=np.uint32)
    lists = [ids[offsets[c] : offsets[c + 1]].copy() for c in range(nlist)]
    pq = None
    codes = None
    if m > 0:
        n_codes = 1 << bits
        dsub = dim // m
        codewords = r.array("<f4", m * n_codes * dsub, "pq codewords").reshape(m, n_codes, dsub)
        pq = PqCodebook(codewords=codewords)
        codes = r.array("u1", count * m, "pq codes").reshape(count, m)
    r.expect_end()
    return IvfIndex(centroids=centroids, lists=lists, pq=pq, codes=codes)
