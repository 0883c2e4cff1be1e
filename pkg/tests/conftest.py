"""Shared small-scale fixtures for the module tests.

The heavyweight benchmark pipeline used by the acceptance checklist lives in
test_acceptance.py; everything here stays tiny so the module tests run in
seconds.
"""

from __future__ import annotations

import numpy as np
import pytest

from knnlm.datastore import Datastore, build_datastore
from knnlm.reference_lm import build_reference_lm
from knnlm.synthetic import make_toy_benchmark


@pytest.fixture(scope="session")
def tiny_bench():
    return make_toy_benchmark(
        seed=11, lm_tokens=4000, store_tokens=5000, valid_tokens=1200, test_tokens=600
    )


@pytest.fixture(scope="session")
def tiny_ref(tiny_bench):
    return build_reference_lm(tiny_bench.lm_docs, tiny_bench.store_docs, dim=32)


@pytest.fixture(scope="session")
def tiny_store(tiny_ref, tiny_bench):
    docs = [tiny_ref.vocab.encode_doc(d) for d in tiny_bench.store_docs]
    return build_datastore(docs, tiny_ref.encoder)


def random_store(n: int, dim: int, seed: int, n_tokens: int = 12) -> Datastore:
    """Ad-hoc datastore with Gaussian keys and random values, for oracle tests."""
    rng = np.random.default_rng(seed)
    return Datastore(
        keys=rng.standard_normal((n, dim)).astype(np.float32),
        values=rng.integers(0, n_tokens, size=n).astype(np.int64),
        weights=np.ones(n, dtype=np.float32),
        provenance=f"source_tokens={n}",
    )


@pytest.fixture
def store_factory():
    return random_store
