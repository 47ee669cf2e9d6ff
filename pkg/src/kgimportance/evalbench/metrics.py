"""NDCG@k and cross-validation folds."""
from __future__ import annotations

from typing import Mapping, Union

import numpy as np

from ..signals import InputSignal


class EvaluationError(Exception):
    pass


class FoldError(EvaluationError):
    pass


Paired = Union[InputSignal, Mapping[int, float], tuple]


def _pairs(x) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, InputSignal):
        return x.ids, x.vals
    if isinstance(x, tuple):
        return np.asarray(x[0], dtype=np.int64), np.asarray(x[1], dtype=np.float64)
    keys = np.array(sorted(x), dtype=np.int64)
    return keys, np.array([x[k] for k in keys.tolist()], dtype=np.float64)


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_aligned(estimates, truths, k: int, ids=None) -> float:
    """NDCG@k of aligned arrays; ties in the estimate are broken by ascending id."""
    est = np.asarray(estimates, dtype=np.float64)
    truth = np.asarray(truths, dtype=np.float64)
    if est.size == 0:
        raise EvaluationError("NDCG over an empty list")
    if k < 1:
        raise EvaluationError("k must be >= 1")
    if ids is None:
        ids = np.arange(len(est))
    order = np.lexsort((np.asarray(ids), -est))
    kk = min(k, len(est))
    disc = _discounts(kk)
    idcg = float(np.sort(truth)[::-1][:kk] @ disc)
    if idcg == 0.0:
        return 1.0
    return float(truth[order[:kk]] @ disc) / idcg


def ndcg_at_k(estimates: Paired, truths: Paired, k: int) -> float:
    """NDCG@k over the key overlap of two partial maps."""
    ei, ev = _pairs(estimates)
    ti, tv = _pairs(truths)
    common, ie, it = np.intersect1d(ei, ti, return_indices=True)
    if len(common) == 0:
        raise EvaluationError("estimates and truths share no entities")
    if np.any(tv[it] < 0):
        raise EvaluationError("truth values must be >= 0")
    return ndcg_aligned(ev[ie], tv[it], k, common)


def ndcg_vector(z, signal: InputSignal, k: int) -> float:
    """NDCG@k of a full importance vector against a signal's observed entries."""
    return ndcg_aligned(np.asarray(z)[signal.ids], signal.vals, k, signal.ids)


def make_folds(signal: InputSignal, k: int = 5, seed: int = 0) -> list[tuple[InputSignal, InputSignal]]:
    """Seeded k-fold split of a signal's domain into (train, test) sub-signals."""
    if k < 2:
        raise FoldError("need at least 2 folds")
    if len(signal) < k:
        raise FoldError(f"signal {signal.name!r} has {len(signal)} entries, fewer than {k} folds")
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(signal.ids)
    parts = np.array_split(shuffled, k)
    folds = []
    for f, test_ids in enumerate(parts):
        train_ids = np.concatenate([p for g, p in enumerate(parts) if g != f])
        folds.append((signal.restrict(train_ids), signal.restrict(test_ids)))
    return folds
