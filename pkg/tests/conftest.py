"""Shared builders for small random graphs, features and signals."""
import math

import numpy as np
import pytest

from kgimportance.graph import KnowledgeGraph, NodeFeatures
from kgimportance.signals import InputSignal, preprocess_log


def random_kg(rng, n=8, num_predicates=3, num_triples=None, types=None) -> KnowledgeGraph:
    if num_triples is None:
        num_triples = 2 * n
    s = rng.integers(n, size=num_triples)
    o = rng.integers(n, size=num_triples)
    p = rng.integers(num_predicates, size=num_triples)
    return KnowledgeGraph(
        [f"e{i}" for i in range(n)],
        [f"p{k}" for k in range(num_predicates)],
        np.stack([s, p, o], axis=1),
        types,
    )


def random_signal(rng, name, n, size, preprocessed=True) -> InputSignal:
    ids = np.sort(rng.choice(n, size=size, replace=False))
    sig = InputSignal(name, ids, rng.gamma(2.0, 3.0, size=size))
    return preprocess_log(sig) if preprocessed else sig


def random_instance(seed, n=12, num_features=5, num_signals=2):
    rng = np.random.default_rng(seed)
    kg = random_kg(rng, n=n, num_predicates=3)
    feats = NodeFeatures(rng.normal(size=(n, num_features)))
    sigs = [random_signal(rng, f"s{k}", n, max(2, n // 2)) for k in range(num_signals)]
    return kg, feats, sigs


def brute_ndcg(est, truth, k):
    """Position-by-position NDCG with ties broken by list index (ids ascending)."""
    n = len(est)
    order = sorted(range(n), key=lambda i: (-est[i], i))
    ideal = sorted(truth, reverse=True)
    dcg = sum(truth[order[p]] / math.log2(p + 2) for p in range(min(k, n)))
    idcg = sum(ideal[p] / math.log2(p + 2) for p in range(min(k, n)))
    return 1.0 if idcg == 0 else dcg / idcg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
