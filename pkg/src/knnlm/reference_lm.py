"""Desk-scale reference language model.

Three deterministic pieces stand in for a large neural LM:

* ``CountLM`` — an interpolated n-gram model with additive smoothing, giving a
  strictly positive next-token distribution over the whole vocabulary.
* ``ContextEncoder`` — a seeded embedding table plus exponential-decay window
  sum, L2-normalized, mapping any context to a fixed-size key vector.
* ``SuffixTables`` — frequency and distinct-successor ("fertility") counts for
  context suffixes of length 1..4, feeding the retrieval gate's features.

All contexts are left-padded with the reserved BOS token so position 0 of a
document has a defined context.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .binio import Reader, Writer
from .corpus import Vocabulary
from .errors import FormatError, InvalidInputError

MAGIC = b"KNNL"
VERSION = 1

DEFAULT_DIM = 64
DEFAULT_GAMMA = 0.5
DEFAULT_WINDOW = 8
DEFAULT_ORDER = 3
DEFAULT_ALPHA = 0.1
MAX_SUFFIX_N = 4


@dataclass
class CountLM:
    """Interpolated additive-smoothed n-gram model over token ids."""

    vocab_size: int
    bos_id: int
    order: int
    alpha: float
    weights: tuple[float, ...]  # mixture weight per order 1..order, sums to 1
    # per order n (index n-1): {context tuple of n-1 ids: (total, ids, counts)}
    tables: list[dict[tuple[int, ...], tuple[int, np.ndarray, np.ndarray]]]

    def next_token_dist(self, context: Sequence[int]) -> np.ndarray:
        """Smoothed next-token distribution, strictly positive, sums to 1."""
        v = self.vocab_size
        out = np.zeros(v, dtype=np.float64)
        for n in range(1, self.order + 1):
            suffix = _padded_tail(context, n - 1, self.bos_id)
            total, ids, counts = self.tables[n - 1].get(suffix, (0, None, None))
            denom = total + self.alpha * v
            w = self.weights[n - 1]
            out += w * (self.alpha / denom)
            if ids is not None:
                out[ids] += w * (counts / denom)
        return out

    def log_prob(self, context: Sequence[int], token: int) -> float:
        return float(np.log(self.next_token_dist(context)[token]))


@dataclass
class ContextEncoder:
    """Deterministic context-to-key function: decayed window sum of embeddings."""

    embeddings: np.ndarray  # (V, d) float32
    gamma: float
    window: int
    bos_id: int
    seed: int

    @classmethod
    def create(
        cls,
        vocab_size: int,
        dim: int = DEFAULT_DIM,
        gamma: float = DEFAULT_GAMMA,
        window: int = DEFAULT_WINDOW,
        bos_id: int = 0,
        seed: int = 0,
    ) -> "ContextEncoder":
        rng = np.random.default_rng(seed)
        emb = rng.standard_normal((vocab_size, dim), dtype=np.float32)
        return cls(embeddings=emb, gamma=gamma, window=window, bos_id=bos_id, seed=seed)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    def _coefs(self) -> np.ndarray:
        # position 0 is the oldest token in the window
        return (self.gamma ** np.arange(self.window - 1, -1, -1, dtype=np.float64)).astype(
            np.float32
        )

    def window_ids(self, context: Sequence[int]) -> np.ndarray:
        pad = [self.bos_id] * self.window + list(context)
        return np.asarray(pad[-self.window :], dtype=np.int64)

    def encode_windows(self, windows: np.ndarray) -> np.ndarray:
        """Encode (B, window) token-id windows into (B, d) unit-norm keys."""
        coefs = self._coefs()
        acc = np.zeros((windows.shape[0], self.dim), dtype=np.float32)
        for pos in range(self.window):
            acc += coefs[pos] * self.embeddings[windows[:, pos]]
        norms = np.sqrt(np.einsum("bd,bd->b", acc, acc))
        norms = np.maximum(norms, np.float32(1e-12))
        return acc / norms[:, None]

    def encode(self, context: Sequence[int]) -> np.ndarray:
        return self.encode_windows(self.window_ids(context)[None, :])[0]


@dataclass
class SuffixTables:
    """Per-position suffix statistics of the datastore training corpus.

    ``tables[n-1]`` maps an n-token context suffix (BOS-padded at document
    starts) to ``(frequency, fertility)`` where fertility is the number of
    distinct tokens that followed it.
    """

    max_n: int
    tables: list[dict[tuple[int, ...], tuple[int, int]]]

    def lookup(self, suffix: tuple[int, ...]) -> tuple[int, int]:
        n = len(suffix)
        if not 1 <= n <= self.max_n:
            raise InvalidInputError(f"suffix length {n} outside 1..{self.max_n}")
        return self.tables[n - 1].get(suffix, (0, 0))

    def freq(self, suffix: tuple[int, ...]) -> int:
        return self.lookup(suffix)[0]

    def fert(self, suffix: tuple[int, ...]) -> int:
        return self.lookup(suffix)[1]


@dataclass
class StepOutput:
    """Per-position bundle: the LM distribution, the key vector, and summaries."""

    p_nlm: np.ndarray  # (V,) float64
    ctx_vec: np.ndarray  # (d,) float32
    conf: float
    ent: float


def _padded_tail(context: Sequence[int], n: int, bos_id: int) -> tuple[int, ...]:
    """Last n tokens of the context, left-padded with BOS."""
    if n == 0:
        return ()
    ctx = list(context[-n:]) if len(context) >= n else [bos_id] * (n - len(context)) + list(context)
    return tuple(ctx)


def _as_docs(corpus) -> list[list[int]]:
    if len(corpus) == 0:
        raise InvalidInputError("corpus is empty")
    first = corpus[0]
    if isinstance(first, (int, np.integer)):
        return [[int(t) for t in corpus]]
    return [[int(t) for t in doc] for doc in corpus]


def fit_count_lm(
    corpus,
    vocab_size: int,
    bos_id: int = 0,
    order: int = DEFAULT_ORDER,
    alpha: float = DEFAULT_ALPHA,
    weights: Sequence[float] | None = None,
) -> CountLM:
    """Fit the interpolated n-gram model on a corpus of token ids.

    `corpus` is either a flat id sequence or a list of documents; counts never
    cross document boundaries.
    """
    docs = _as_docs(corpus)
    total_tokens = sum(len(d) for d in docs)
    if total_tokens < order:
        raise InvalidInputError(f"corpus has {total_tokens} tokens; need at least {order}")
    if weights is None:
        weights = tuple(range(1, order + 1))
    if len(weights) != order:
        raise InvalidInputError(f"expected {order} mixture weights, got {len(weights)}")
    wsum = float(sum(weights))
    weights = tuple(float(w) / wsum for w in weights)

    raw: list[dict[tuple[int, ...], int]] = [dict() for _ in range(order)]
    for doc in docs:
        padded = [bos_id] * (order - 1) + doc
        for i, w in enumerate(doc):
            for n in range(1, order + 1):
                gram = tuple(padded[i + order - n : i + order - 1]) + (w,)
                tab = raw[n - 1]
                tab[gram] = tab.get(gram, 0) + 1

    tables: list[dict[tuple[int, ...], tuple[int, np.ndarray, np.ndarray]]] = []
    for n in range(1, order + 1):
        grouped: dict[tuple[int, ...], list[tuple[int, int]]] = {}
        for gram, cnt in raw[n - 1].items():
            grouped.setdefault(gram[:-1], []).append((gram[-1], cnt))
        table = {}
        for ctx, pairs in grouped.items():
            pairs.sort()
            ids = np.asarray([p[0] for p in pairs], dtype=np.int64)
            counts = np.asarray([p[1] for p in pairs], dtype=np.float64)
            table[ctx] = (int(counts.sum()), ids, counts)
        tables.append(table)
    return CountLM(
        vocab_size=vocab_size,
        bos_id=bos_id,
        order=order,
        alpha=float(alpha),
        weights=weights,
        tables=tables,
    )


def build_suffix_tables(corpus, bos_id: int = 0, max_n: int = MAX_SUFFIX_N) -> SuffixTables:
    """Count suffix frequencies and fertilities over a corpus of token ids."""
    docs = _as_docs(corpus)
    freq: list[dict[tuple[int, ...], int]] = [dict() for _ in range(max_n)]
    succ: list[dict[tuple[int, ...], set[int]]] = [dict() for _ in range(max_n)]
    for doc in docs:
        padded = [bos_id] * max_n + doc
        for i, w in enumerate(doc):
            for n in range(1, max_n + 1):
                suffix = tuple(padded[i + max_n - n : i + max_n])
                f = freq[n - 1]
                f[suffix] = f.get(suffix, 0) + 1
                succ[n - 1].setdefault(suffix, set()).add(w)
    tables = []
    for n in range(max_n):
        tables.append({s: (c, len(succ[n][s])) for s, c in freq[n].items()})
    return SuffixTables(max_n=max_n, tables=tables)


def encode_context(encoder: ContextEncoder, context: Sequence[int]) -> np.ndarray:
    """Key vector for one context (empty context encodes the BOS padding)."""
    return encoder.encode(context)


def lm_step(lm: CountLM, encoder: ContextEncoder, context: Sequence[int]) -> StepOutput:
    """One evaluation step: LM distribution, key vector, confidence, entropy."""
    p = lm.next_token_dist(context)
    ent = float(-np.sum(p * np.log(p)))
    return StepOutput(
        p_nlm=p,
        ctx_vec=encoder.encode(context),
        conf=float(p.max()),
        ent=ent,
    )


@dataclass
class ReferenceLm:
    """Bundle of everything the evaluation pipeline needs from the base model."""

    vocab: Vocabulary
    lm: CountLM
    encoder: ContextEncoder
    tables: SuffixTables

    def step(self, context: Sequence[int]) -> StepOutput:
        return lm_step(self.lm, self.encoder, context)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(reference_lm_to_bytes(self))

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceLm":
        return reference_lm_from_bytes(Path(path).read_bytes(), name=str(path))


def build_reference_lm(
    lm_docs: list[list[str]],
    store_docs: list[list[str]] | None = None,
    *,
    dim: int = DEFAULT_DIM,
    gamma: float = DEFAULT_GAMMA,
    window: int = DEFAULT_WINDOW,
    order: int = DEFAULT_ORDER,
    alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
) -> ReferenceLm:
    """Fit the full reference bundle.

    The vocabulary covers both corpora; the count model is fit on `lm_docs`;
    the suffix tables come from `store_docs` (the corpus the datastore is
    built from), falling back to `lm_docs` when the two corpora coincide.
    """
    if store_docs is None:
        store_docs = lm_docs
    vocab = Vocabulary.build(list(lm_docs) + list(store_docs))
    lm_ids = [vocab.encode_doc(d) for d in lm_docs]
    store_ids = [vocab.encode_doc(d) for d in store_docs]
    lm = fit_count_lm(lm_ids, vocab_size=len(vocab), bos_id=vocab.bos_id, order=order, alpha=alpha)
    encoder = ContextEncoder.create(
        vocab_size=len(vocab), dim=dim, gamma=gamma, window=window, bos_id=vocab.bos_id, seed=seed
    )
    tables = build_suffix_tables(store_ids, bos_id=vocab.bos_id)
    return ReferenceLm(vocab=vocab, lm=lm, encoder=encoder, tables=tables)


# --- serialization ---------------------------------------------------------

def reference_lm_to_bytes(ref: ReferenceLm) -> bytes:
    w = Writer()
    w.magic(MAGIC)
    w.u32(VERSION)
    vocab_blob = "\n".join(ref.vocab.tokens).encode("utf-8")
    w.u32(len(ref.vocab))
    w.blob(vocab_blob)
    w.u32(ref.vocab.bos_id)
    w.u32(ref.vocab.unk_id)

    enc = ref.encoder
    w.u32(enc.dim)
    w.u32(enc.window)
    w.f64(enc.gamma)
    w.u64(enc.seed)
    w.array(enc.embeddings, "<f4")

    lm = ref.lm
    w.u32(lm.order)
    w.f64(lm.alpha)
    for wt in lm.weights:
        w.f64(wt)
    for n in range(1, lm.order + 1):
        rows: list[tuple[tuple[int, ...], int]] = []
        for ctx, (_, ids, counts) in lm.tables[n - 1].items():
            for tok, cnt in zip(ids.tolist(), counts.tolist()):
                rows.append((ctx + (tok,), int(cnt)))
        rows.sort(key=lambda kv: kv[0])
        w.u64(len(rows))
        if rows:
            grams = np.asarray([r[0] for r in rows], dtype=np.uint32)
            cnts = np.asarray([r[1] for r in rows], dtype=np.uint32)
            w.array(grams, "<u4")
            w.array(cnts, "<u4")

    w.u32(ref.tables.max_n)
    for n in range(1, ref.tables.max_n + 1):
        items = sorted(ref.tables.tables[n - 1].items())
        w.u64(len(items))
        if items:
            sfx = np.asarray([k for k, _ in items], dtype=np.uint32)
            frq = np.asarray([v[0] for _, v in items], dtype=np.uint32)
            frt = np.asarray([v[1] for _, v in items], dtype=np.uint32)
            w.array(sfx, "<u4")
            w.array(frq, "<u4")
            w.array(frt, "<u4")
    return w.getvalue()


def reference_lm_from_bytes(buf: bytes, name: str = "lm artifact") -> ReferenceLm:
    r = Reader(buf, name=name)
    r.expect_magic(MAGIC)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported format version {version}", 4)
    vocab_size = r.u32("vocab size")
    tokens = r.blob("vocab tokens").decode("utf-8").split("\n")
    if len(tokens) != vocab_size:
        raise InvalidInputError(f"{name}: vocab blob has {len(tokens)} tokens, header says {vocab_size}")
    vocab = Vocabulary.from_tokens(tokens)
    bos = r.u32("bos id")
    r.u32("unk id")

    dim = r.u32("encoder dim")
    window = r.u32("encoder window")
    gamma = r.f64("encoder gamma")
    seed = r.u64("encoder seed")
    emb = r.array("<f4", vocab_size * dim, "embedding table").reshape(vocab_size, dim)
    encoder = ContextEncoder(embeddings=emb, gamma=gamma, window=window, bos_id=bos, seed=seed)

    order = r.u32("lm order")
    alpha = r.f64("lm alpha")
    weights = tuple(r.f64("lm weight") for _ in range(order))
    tables: list[dict[tuple[int, ...], tuple[int, np.ndarray, np.ndarray]]] = []
    for n in range(1, order + 1):
        rows = r.u64(f"order-{n} row count")
        table: dict[tuple[int, ...], tuple[int, np.ndarray, np.ndarray]] = {}
        if rows:
            grams = r.array("<u4", rows * n, f"order-{n} grams").reshape(rows, n)
            cnts = r.array("<u4", rows, f"order-{n} counts")
            grouped: dict[tuple[int, ...], list[tuple[int, int]]] = {}
            for row, cnt in zip(grams.tolist(), cnts.tolist()):
                grouped.setdefault(tuple(row[:-1]), []).append((row[-1], cnt))
            for ctx, pairs in grouped.items():
                ids = np.asarray([p[0] for p in pairs], dtype=np.int64)
                counts = np.asarray([p[1] for p in pairs], dtype=np.float64)
                table[ctx] = (int(counts.sum()), ids, counts)
        tables.append(table)
    lm = CountLM(
        vocab_size=vocab_size, bos_id=bos, order=order, alpha=alpha, weights=weights, tables=tables
    )

    max_n = r.u32("suffix table max n")
    stabs = []
    for n in range(1, max_n + 1):
        rows = r.u64(f"suffix-{n} row count")
        table: dict[tuple[int, ...], tuple[int, int]] = {}
        if rows:
            sfx = r.array("<u4", rows * n, f"suffix-{n} grams").reshape(rows, n)
            frq = r.array("<u4", rows, f"suffix-{n} freq")
            frt = r.array("<u4", rows, f"suffix-{n} fert")
            for row, f, t in zip(sfx.tolist(), frq.tolist(), frt.tolist()):
                table[tuple(row)] = (int(f), int(t))
        stabs.append(table)
    r.expect_end()
    return ReferenceLm(vocab=vocab, lm=lm, encoder=encoder, tables=SuffixTables(max_n=max_n, tables=stabs))
