"""The key-value datastore: one (key vector, next token, weight) record per
training token.

Freshly built stores carry weight 1 everywhere; pruning may replace groups of
records with weighted representatives. Stores are immutable after
construction — every transformation returns a new re-indexed store with a
provenance note appended.

File format ("KNND", little-endian):
    magic 4B | version u32 | dim u32 | count u64 | flags u32
    keys (count*dim f32, or f16 when flags bit 1) | values u32[count]
    weights f32[count] (when flags bit 0) | provenance blob (u32 len + UTF-8)
    optional trailing "KNNT" transform section
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import Reader, Writer
from .errors import FormatError, InvalidInputError
from .reduction import PcaTransform, transform_from_reader, transform_to_bytes
from .reference_lm import ContextEncoder

MAGIC = b"KNND"
VERSION = 1
FLAG_WEIGHTS = 1 << 0
FLAG_HALF = 1 << 1


@dataclass
class DatastoreRecord:
    key: np.ndarray
    value: int
    weight: float


@dataclass
class Datastore:
    keys: np.ndarray  # (N, d) float32
    values: np.ndarray  # (N,) int64 token ids
    weights: np.ndarray  # (N,) float32
    provenance: str = ""
    transform: PcaTransform | None = None

    def __post_init__(self) -> None:
        if self.keys.ndim != 2:
            raise InvalidInputError("keys must be a (N, dim) matrix")
        n = self.keys.shape[0]
        if len(self.values) != n or len(self.weights) != n:
            raise InvalidInputError("keys, values and weights must have equal length")
        if n == 0:
            raise InvalidInputError("datastore must contain at least one record")

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def record(self, i: int) -> DatastoreRecord:
        return DatastoreRecord(key=self.keys[i], value=int(self.values[i]), weight=float(self.weights[i]))

    def total_weight(self) -> float:
        return float(np.sum(self.weights, dtype=np.float64))

    def map_query(self, vec: np.ndarray) -> np.ndarray:
        """Apply the store's transform (if any) so a query lives in key space."""
        if self.transform is None:
            return np.asarray(vec, dtype=np.float32)
        return self.transform.apply(vec).astype(np.float32)

    def with_records(
        self,
        keys: np.ndarray,
        values: np.ndarray,
        weights: np.ndarray,
        note: str,
        transform: PcaTransform | None = None,
    ) -> "Datastore":
        """Derived store: new records, provenance extended by one note line."""
        prov = self.provenance + ("\n" if self.provenance else "") + note
        return Datastore(
            keys=np.ascontiguousarray(keys, dtype=np.float32),
            values=np.ascontiguousarray(values, dtype=np.int64),
            weights=np.ascontiguousarray(weights, dtype=np.float32),
            provenance=prov,
            transform=transform if transform is not None else self.transform,
        )

    def provenance_get(self, key: str) -> str | None:
        """Value of a `key=value` provenance line, if present (last wins)."""
        found = None
        for line in self.provenance.splitlines():
            if line.startswith(key + "="):
                found = line[len(key) + 1 :]
        return found


def _as_docs(corpus) -> list[list[int]]:
    if len(corpus) == 0:
        raise InvalidInputError("corpus is empty")
    first = corpus[0]
    if isinstance(first, (int, np.integer)):
        return [[int(t) for t in corpus]]
    docs = [[int(t) for t in doc] for doc in corpus]
    if any(len(d) == 0 for d in docs):
        raise InvalidInputError("corpus contains an empty document")
    return docs


def build_datastore(corpus, encoder: ContextEncoder) -> Datastore:
    """Encode every training position into one record.

    Record t of a document has key = encoder(context before t), value = the
    token at t, weight 1. Contexts never cross document boundaries; the
    document start is BOS-padded by the encoder. The record count equals the
    corpus token count exactly.
    """
    docs = _as_docs(corpus)
    v = encoder.vocab_size
    key_blocks: list[np.ndarray] = []
    value_blocks: list[np.ndarray] = []
    w = encoder.window
    for doc in docs:
        ids = np.asarray(doc, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= v:
            bad = int(ids[(ids < 0) | (ids >= v)][0])
            raise InvalidInputError(f"token id {bad} outside vocabulary of size {v}")
        padded = np.concatenate([np.full(w, encoder.bos_id, dtype=np.int64), ids])
        windows = np.lib.stride_tricks.sliding_window_view(padded, w)[: len(ids)]
        key_blocks.append(encoder.encode_windows(np.ascontiguousarray(windows)))
        value_blocks.append(ids)
    keys = np.concatenate(key_blocks, axis=0)
    values = np.concatenate(value_blocks)
    n = keys.shape[0]
    prov = f"source_tokens={n}\nencoder_seed={encoder.seed}\ndim={encoder.dim}"
    return Datastore(
        keys=np.ascontiguousarray(keys, dtype=np.float32),
        values=values,
        weights=np.ones(n, dtype=np.float32),
        provenance=prov,
    )


def save_datastore(ds: Datastore, path: str | Path, half_precision: bool = False) -> None:
    w = Writer()
    w.magic(MAGIC)
    w.u32(VERSION)
    w.u32(ds.dim)
    w.u64(len(ds))
    flags = FLAG_WEIGHTS | (FLAG_HALF if half_precision else 0)
    w.u32(flags)
    w.array(ds.keys, "<f2" if half_precision else "<f4")
    w.array(ds.values, "<u4")
    w.array(ds.weights, "<f4")
    w.blob(ds.provenance.encode("utf-8"))
    if ds.transform is not None:
        w.raw(transform_to_bytes(ds.transform))
    Path(path).write_bytes(w.getvalue())


def load_datastore(path: str | Path) -> Datastore:
    buf = Path(path).read_bytes()
    r = Reader(buf, name=str(path))
    r.expect_magic(MAGIC)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", 4)
    dim = r.u32("dim")
    count = r.u64("record count")
    flags = r.u32("flags")
    key_dtype = "<f2" if flags & FLAG_HALF else "<f4"
    keys = r.array(key_dtype, count * dim, "key matrix").astype(np.float32).reshape(count, dim)
    values = r.array("<u4", count, "values").astype(np.int64)
    if flags & FLAG_WEIGHTS:
        weights = r.array("<f4", count, "weights")
    else:
        weights = np.ones(count, dtype=np.float32)
    provenance = r.blob("provenance").decode("utf-8")
    transform = None
    if r.remaining:
        transform = transform_from_reader(r)
        r.expect_end()
    return Datastore(keys=keys, values=values, weights=weights, provenance=provenance, transform=transform)


def datastore_stats(ds: Datastore) -> dict:
    """Summary counters: record count, dim, exact total weight, byte size,
    and the per-token record histogram."""
    hist = np.bincount(ds.values, minlength=0)
    histogram = {int(tok): int(cnt) for tok, cnt in enumerate(hist) if cnt > 0}
    return {
        "count": len(ds),
        "dim": ds.dim,
        "total_weight": ds.total_weight(),
        "bytes": int(ds.keys.nbytes + ds.values.nbytes + ds.weights.nbytes),
        "value_histogram": histogram,
    }
