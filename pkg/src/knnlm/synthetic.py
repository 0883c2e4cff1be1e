"""Synthetic two-domain benchmark corpus.

Documents are built from fixed phrase banks: a "general" bank and a
"specialist" bank drawn from disjoint sub-vocabularies, plus runs of noise
tokens. The base-LM corpus uses only general material; the datastore, tuning
and test corpora come from the specialist domain (which still mixes in
general phrases and noise). Specialist phrases repeat verbatim, so retrieval
from the datastore resolves their continuations while the base LM, never
having seen the domain, cannot - the shape of a domain-adaptation setting,
at desk scale.

The specialist material has a two-scale structure: a small head bank of hot
phrases recurs hundreds of times (redundant records a merge-style pruner can
collapse almost losslessly) while a large tail bank of phrases appears only a
couple of times each, so indiscriminate record removal regularly destroys a
tail phrase's entire retrieval support.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import write_corpus


@dataclass
class ToyBenchmark:
    lm_docs: list[list[str]]  # fits the base LM (general domain)
    store_docs: list[list[str]]  # builds the datastore (specialist domain)
    valid_docs: list[list[str]]  # tuning / gate training (specialist domain)
    test_docs: list[list[str]]  # held-out evaluation (specialist domain)

    def token_counts(self) -> dict[str, int]:
        return {
            "lm": sum(len(d) for d in self.lm_docs),
            "store": sum(len(d) for d in self.store_docs),
            "valid": sum(len(d) for d in self.valid_docs),
            "test": sum(len(d) for d in self.test_docs),
        }

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for split in ("lm", "store", "valid", "test"):
            path = out / f"{split}.txt"
            write_corpus(getattr(self, f"{split}_docs"), path)
            paths[split] = path
        return paths


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64)
    return w / w.sum()


def _make_phrases(
    rng: np.random.Generator, vocab: list[str], count: int, min_len: int = 5, max_len: int = 9
) -> list[list[str]]:
    weights = _zipf_weights(len(vocab))
    phrases = []
    for _ in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        phrases.append([vocab[int(i)] for i in rng.choice(len(vocab), size=length, p=weights)])
    return phrases


def _make_doc(
    rng: np.random.Generator,
    target_len: int,
    segments: list[tuple[float, object]],
) -> list[str]:
    """Concatenate segments until target_len; each segment source is
    (probability, phrase bank or noise vocab marker)."""
    probs = np.asarray([p for p, _ in segments])
    probs = probs / probs.sum()
    doc: list[str] = []
    while len(doc) < target_len:
        choice = int(rng.choice(len(segments), p=probs))
        src = segments[choice][1]
        if isinstance(src, tuple) and src[0] == "noise":
            vocab = src[1]
            run = int(rng.integers(2, 6))
            doc.extend(vocab[int(i)] for i in rng.integers(0, len(vocab), size=run))
        else:
            bank, weights = src
            doc.extend(bank[int(rng.choice(len(bank), p=weights))])
    return doc[:target_len]


def make_toy_benchmark(
    seed: int = 0,
    lm_tokens: int = 80_000,
    store_tokens: int = 100_000,
    valid_tokens: int = 15_000,
    test_tokens: int = 8_000,
    general_types: int = 400,
    domain_types: int = 250,
    n_general_phrases: int = 80,
    n_domain_head_phrases: int = 40,
    n_domain_tail_phrases: int = 1000,
) -> ToyBenchmark:
    """Generate the four splits deterministically from one seed."""
    root = np.random.SeedSequence(seed)
    bank_rng, lm_rng, store_rng, valid_rng, test_rng = [
        np.random.default_rng(s) for s in root.spawn(5)
    ]
    general_vocab = [f"g{i:03d}" for i in range(general_types)]
    domain_vocab = [f"s{i:03d}" for i in range(domain_types)]
    full_vocab = general_vocab + domain_vocab

    general_bank = _make_phrases(bank_rng, general_vocab, n_general_phrases)
    head_bank = _make_phrases(bank_rng, domain_vocab, n_domain_head_phrases)
    tail_bank = _make_phrases(bank_rng, domain_vocab, n_domain_tail_phrases)
    g_weights = _zipf_weights(len(general_bank))
    head_weights = _zipf_weights(len(head_bank))
    tail_weights = np.full(len(tail_bank), 1.0 / len(tail_bank))

    general_segments = [
        (0.75, (general_bank, g_weights)),
        (0.25, ("noise", general_vocab)),
    ]
    domain_segments = [
        (0.20, (head_bank, head_weights)),
        (0.30, (tail_bank, tail_weights)),
        (0.25, (general_bank, g_weights)),
        (0.25, ("noise", full_vocab)),
    ]

    def build_split(rng: np.random.Generator, budget: int, segments) -> list[list[str]]:
        docs = []
        total = 0
        while total < budget:
            length = int(rng.integers(300, 701))
            length = min(length, budget - total)
            if length < 20:
                length = budget - total
            docs.append(_make_doc(rng, length, segments))
            total += length
        return docs

    return ToyBenchmark(
        lm_docs=build_split(lm_rng, lm_tokens, general_segments),
        store_docs=build_split(store_rng, store_tokens, domain_segments),
        valid_docs=build_split(valid_rng, valid_tokens, domain_segments),
        test_docs=build_split(test_rng, test_tokens, domain_segments),
    )
