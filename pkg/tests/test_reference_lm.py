"""Tests for the count LM, context encoder and suffix tables."""

import math

import numpy as np
import pytest

from knnlm.errors import InvalidInputError
from knnlm.index import flat_search
from knnlm.reference_lm import (
    ContextEncoder,
    ReferenceLm,
    build_reference_lm,
    build_suffix_tables,
    encode_context,
    fit_count_lm,
    lm_step,
)


class TestCountLM:
    def test_unigram_repeated_token_is_mode(self):
        lm = fit_count_lm([0, 0, 0], vocab_size=4, bos_id=1, order=1, alpha=0.1)
        p = lm.next_token_dist([])
        assert p.argmax() == 0

    def test_distribution_positive_and_normalized(self):
        rng = np.random.default_rng(0)
        corpus = rng.integers(0, 9, size=200).tolist()
        lm = fit_count_lm(corpus, vocab_size=9, bos_id=0, order=3, alpha=0.1)
        for ctx in ([], [1], [2, 3], corpus[:17]):
            p = lm.next_token_dist(ctx)
            assert np.all(p > 0)
            assert abs(p.sum() - 1.0) < 1e-6

    def test_perplexity_matches_counting_oracle(self):
        # independent plain-dict reimplementation of the interpolated
        # add-alpha model, compared on a held-out stream
        rng = np.random.default_rng(3)
        v, order, alpha, bos = 7, 3, 0.1, 0
        train = rng.integers(1, v, size=100).tolist()
        test = rng.integers(1, v, size=40).tolist()
        lm = fit_count_lm(train, vocab_size=v, bos_id=bos, order=order, alpha=alpha)

        weights = [w / 6.0 for w in (1, 2, 3)]
        counts = [dict() for _ in range(order)]
        padded = [bos] * (order - 1) + train
        for i, w in enumerate(train):
            for n in range(1, order + 1):
                g = tuple(padded[i + order - n : i + order - 1]) + (w,)
                counts[n - 1][g] = counts[n - 1].get(g, 0) + 1

        def oracle_prob(ctx, w):
            total_p = 0.0
            for n in range(1, order + 1):
                need = n - 1
                suffix = tuple(([bos] * need + list(ctx))[-need:]) if need else ()
                num = counts[n - 1].get(suffix + (w,), 0) + alpha
                den = sum(c for g, c in counts[n - 1].items() if g[:-1] == suffix) + alpha * v
                total_p += weights[n - 1] * num / den
            return total_p

        nll_lm = nll_oracle = 0.0
        for t, w in enumerate(test):
            ctx = test[:t]
            nll_lm -= math.log(lm.next_token_dist(ctx)[w])
            nll_oracle -= math.log(oracle_prob(ctx, w))
        assert abs(math.exp(nll_lm / len(test)) - math.exp(nll_oracle / len(test))) < 1e-9

    def test_empty_corpus_rejected(self):
        with pytest.raises(InvalidInputError):
            fit_count_lm([], vocab_size=4, bos_id=0)

    def test_too_short_corpus_rejected(self):
        with pytest.raises(InvalidInputError):
            fit_count_lm([1, 2], vocab_size=4, bos_id=0, order=3)


class TestContextEncoder:
    def setup_method(self):
        self.enc = ContextEncoder.create(vocab_size=20, dim=16, gamma=0.5, window=4, seed=5)

    def test_identical_contexts_identical_vectors(self):
        a = encode_context(self.enc, [3, 1, 2])
        b = encode_context(self.enc, [3, 1, 2])
        assert np.array_equal(a, b)

    def test_window_truncation(self):
        # contexts sharing the last `window` tokens encode identically
        a = encode_context(self.enc, [9, 9, 9, 3, 1, 2, 4])
        b = encode_context(self.enc, [5, 5, 5, 3, 1, 2, 4])
        assert np.array_equal(a, b)

    def test_out_of_window_token_has_zero_effect(self):
        base = [3, 1, 2, 4]
        a = encode_context(self.enc, [7] + base)
        b = encode_context(self.enc, [8] + base)
        assert float(np.sum((a - b) ** 2)) == 0.0

    def test_keys_unit_norm(self):
        for ctx in ([], [1], [2, 3, 4, 5, 6]):
            v = encode_context(self.enc, ctx)
            assert abs(float(np.linalg.norm(v)) - 1.0) < 1e-5

    def test_empty_context_is_bos_embedding_direction(self):
        v = encode_context(self.enc, [])
        bos = self.enc.embeddings[self.enc.bos_id]
        cos = float(v @ bos / np.linalg.norm(bos))
        assert abs(cos - 1.0) < 1e-5


class TestSuffixTables:
    def test_hand_counted_example(self):
        # "a b a b" with a=2, b=3: "a" occurs twice as a context suffix and
        # is always followed by "b"
        tables = build_suffix_tables([2, 3, 2, 3], bos_id=0)
        assert tables.freq((2,)) == 2
        assert tables.fert((2,)) == 1

    def test_fertility_bounded_by_frequency(self, tiny_ref, tiny_bench):
        tables = tiny_ref.tables
        for n in range(1, tables.max_n + 1):
            for suffix, (freq, fert) in tables.tables[n - 1].items():
                assert 1 <= fert <= freq

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(9)
        doc = rng.integers(1, 6, size=120).tolist()
        tables = build_suffix_tables(doc, bos_id=0, max_n=3)
        for n in range(1, 4):
            freq = {}
            succ = {}
            padded = [0] * n + doc
            for i, w in enumerate(doc):
                sfx = tuple(padded[i : i + n])
                freq[sfx] = freq.get(sfx, 0) + 1
                succ.setdefault(sfx, set()).add(w)
            expected = {s: (c, len(succ[s])) for s, c in freq.items()}
            assert tables.tables[n - 1] == expected


class TestLmStep:
    def test_bounds_and_determinism(self, tiny_ref):
        v = len(tiny_ref.vocab)
        ctx = tiny_ref.vocab.encode_doc(["s001", "s002"])
        a = lm_step(tiny_ref.lm, tiny_ref.encoder, ctx)
        b = lm_step(tiny_ref.lm, tiny_ref.encoder, ctx)
        assert 1.0 / v <= a.conf <= 1.0
        assert 0.0 <= a.ent <= math.log(v) + 1e-9
        assert np.array_equal(a.p_nlm, b.p_nlm)
        assert np.array_equal(a.ctx_vec, b.ctx_vec)

    def test_summaries_match_distribution(self, tiny_ref):
        step = tiny_ref.step([4, 5, 6])
        assert step.conf == pytest.approx(float(step.p_nlm.max()), abs=0)
        assert step.ent == pytest.approx(float(-np.sum(step.p_nlm * np.log(step.p_nlm))), abs=0)


class TestRetrievalSanity:
    def test_repeated_phrase_neighbor_predicts_next_token(self):
        # a corpus dominated by one verbatim phrase: querying with a context
        # that ends inside the phrase must retrieve a training position whose
        # value is the phrase's next token
        from knnlm.datastore import build_datastore

        phrase = ["p1", "p2", "p3", "p4", "p5"]
        docs = []
        rng = np.random.default_rng(2)
        for _ in range(30):
            filler = [f"f{int(i)}" for i in rng.integers(0, 10, size=3)]
            docs.append(filler + phrase + phrase)
        ref = build_reference_lm(docs, dim=16)
        ids = [ref.vocab.encode_doc(d) for d in docs]
        ds = build_datastore(ids, ref.encoder)
        probe = ref.vocab.encode_doc(["f3", "f1", "f2"] + phrase[:3])
        hits = flat_search(ds, ref.encoder.encode(probe), 1)
        assert hits[0].value == ref.vocab.encode(phrase[3])


class TestBundleRoundtrip:
    def test_save_load_preserves_behavior(self, tiny_ref, tmp_path):
        path = tmp_path / "ref.knnl"
        tiny_ref.save(path)
        loaded = ReferenceLm.load(path)
        ctx = [5, 9, 2]
        a = tiny_ref.step(ctx)
        b = loaded.step(ctx)
        assert np.array_equal(a.p_nlm, b.p_nlm)
        assert np.array_equal(a.ctx_vec, b.ctx_vec)
        assert loaded.tables.tables == tiny_ref.tables.tables
        assert loaded.vocab.tokens == tiny_ref.vocab.tokens

    def test_save_is_deterministic(self, tiny_ref, tmp_path):
        from knnlm.reference_lm import reference_lm_to_bytes

        assert reference_lm_to_bytes(tiny_ref) == reference_lm_to_bytes(tiny_ref)
