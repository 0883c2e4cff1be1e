"""Datastore construction, serialization and stats."""

import hashlib

import numpy as np
import pytest

from knnlm.datastore import (
    Datastore,
    build_datastore,
    datastore_stats,
    load_datastore,
    save_datastore,
)
from knnlm.errors import FormatError, InvalidInputError
from knnlm.index import FlatSearcher
from knnlm.pruning import greedy_merge
from knnlm.reference_lm import ContextEncoder, encode_context


@pytest.fixture(scope="module")
def encoder():
    return ContextEncoder.create(vocab_size=30, dim=12, gamma=0.5, window=4, seed=7)


class TestBuild:
    def test_record_count_equals_token_count(self, encoder):
        rng = np.random.default_rng(1)
        corpus = rng.integers(1, 30, size=137).tolist()
        ds = build_datastore(corpus, encoder)
        assert len(ds) == 137
        assert np.array_equal(ds.values, np.asarray(corpus))
        assert np.all(ds.weights == 1.0)

    def test_single_token_corpus(self, encoder):
        ds = build_datastore([17], encoder)
        assert len(ds) == 1
        assert ds.record(0).value == 17
        assert ds.record(0).weight == 1.0

    def test_keys_match_independent_encoding(self, encoder):
        rng = np.random.default_rng(2)
        corpus = rng.integers(1, 30, size=50).tolist()
        ds = build_datastore(corpus, encoder)
        for t in range(50):
            expected = encode_context(encoder, corpus[:t])
            assert np.array_equal(ds.keys[t], expected)

    def test_multi_document_corpus_padding_restarts(self, encoder):
        docs = [[3, 4, 5], [6, 7]]
        ds = build_datastore(docs, encoder)
        assert len(ds) == 5
        # first record of each document encodes the empty (BOS) context
        assert np.array_equal(ds.keys[0], encode_context(encoder, []))
        assert np.array_equal(ds.keys[3], encode_context(encoder, []))

    def test_empty_corpus_rejected(self, encoder):
        with pytest.raises(InvalidInputError):
            build_datastore([], encoder)

    def test_out_of_vocabulary_token_rejected(self, encoder):
        with pytest.raises(InvalidInputError):
            build_datastore([1, 2, 30], encoder)

    def test_build_determinism(self, encoder):
        corpus = list(range(1, 25))
        a = build_datastore(corpus, encoder)
        b = build_datastore(corpus, encoder)
        assert np.array_equal(a.keys, b.keys)
        assert np.array_equal(a.values, b.values)
        assert a.provenance == b.provenance


class TestSerialization:
    def test_roundtrip_identity(self, encoder, tmp_path):
        ds = build_datastore([1, 2, 3], encoder)
        path = tmp_path / "three.knnd"
        save_datastore(ds, path)
        back = load_datastore(path)
        assert np.array_equal(back.keys, ds.keys)
        assert np.array_equal(back.values, ds.values)
        assert np.array_equal(back.weights, ds.weights)
        assert back.provenance == ds.provenance
        assert back.transform is None

    def test_corrupted_magic_is_format_error(self, encoder, tmp_path):
        ds = build_datastore([1, 2, 3], encoder)
        path = tmp_path / "bad.knnd"
        save_datastore(ds, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_datastore(path)

    def test_truncated_file_reports_offset(self, encoder, tmp_path):
        ds = build_datastore([1, 2, 3], encoder)
        path = tmp_path / "trunc.knnd"
        save_datastore(ds, path)
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(FormatError) as err:
            load_datastore(path)
        assert err.value.offset is not None

    def test_large_roundtrip_byte_identical_on_resave(self, tmp_path):
        rng = np.random.default_rng(5)
        ds = Datastore(
            keys=rng.standard_normal((10_000, 8)).astype(np.float32),
            values=rng.integers(0, 50, size=10_000).astype(np.int64),
            weights=np.ones(10_000, dtype=np.float32),
            provenance="source_tokens=10000",
        )
        p1 = tmp_path / "a.knnd"
        p2 = tmp_path / "b.knnd"
        save_datastore(ds, p1)
        save_datastore(load_datastore(p1), p2)
        h1 = hashlib.sha256(p1.read_bytes()).hexdigest()
        h2 = hashlib.sha256(p2.read_bytes()).hexdigest()
        assert h1 == h2

    def test_half_precision_flag(self, encoder, tmp_path):
        ds = build_datastore(list(range(1, 9)), encoder)
        path = tmp_path / "half.knnd"
        save_datastore(ds, path, half_precision=True)
        back = load_datastore(path)
        assert back.keys.dtype == np.float32
        assert np.allclose(back.keys, ds.keys, atol=1e-3)
        # stable under re-save: the f16 grid is a fixpoint
        path2 = tmp_path / "half2.knnd"
        save_datastore(back, path2, half_precision=True)
        assert path.read_bytes() == path2.read_bytes()


class TestStats:
    def test_fresh_store_total_weight(self, encoder):
        ds = build_datastore(list(range(1, 21)), encoder)
        stats = datastore_stats(ds)
        assert stats["count"] == 20
        assert stats["total_weight"] == 20.0
        assert stats["dim"] == encoder.dim
        assert sum(stats["value_histogram"].values()) == 20

    def test_total_weight_invariant_under_greedy_merge(self, tiny_store):
        merged = greedy_merge(tiny_store, FlatSearcher(tiny_store), 4)
        before = datastore_stats(tiny_store)["total_weight"]
        after = datastore_stats(merged)["total_weight"]
        assert before == after == len(tiny_store)

    def test_empty_store_unconstructible(self):
        with pytest.raises(InvalidInputError):
            Datastore(
                keys=np.zeros((0, 4), dtype=np.float32),
                values=np.zeros(0, dtype=np.int64),
                weights=np.zeros(0, dtype=np.float32),
            )
