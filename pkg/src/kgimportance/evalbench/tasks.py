"""Downstream harnesses: signal prediction from other signals (+ importance), forecasting splits."""
from __future__ import annotations

import datetime as dt
import logging
from typing import Mapping, Optional, Sequence

import numpy as np

from ..graph import KnowledgeGraph
from ..objective import AdamState, listwise_with_grad, adam_step
from ..signals import InputSignal
from .metrics import EvaluationError, make_folds, ndcg_aligned

log = logging.getLogger(__name__)


class TaskError(EvaluationError):
    pass


class SplitError(EvaluationError):
    pass


def fit_linear_ranker(x: np.ndarray, y: np.ndarray, lam: float = 0.001, lr: float = 0.01,
                      iterations: int = 500) -> tuple[np.ndarray, float]:
    """Linear scorer x @ w + b fit by Adam on listwise loss + (lam/2)||w||^2."""
    p = {"w": np.zeros(x.shape[1]), "b": np.zeros(())}
    state = AdamState()
    for _ in range(iterations):
        _, g = listwise_with_grad(x @ p["w"] + p["b"], y)
        grads = {"w": x.T @ g + lam * p["w"], "b": np.array(g.sum())}
        adam_step(state, p, grads, lr)
    return p["w"], float(p["b"])


def _column(source, ids: np.ndarray) -> np.ndarray:
    if isinstance(source, InputSignal):
        return source.vals[np.searchsorted(source.ids, ids)]
    return np.asarray(source, dtype=np.float64)[ids]


def signal_prediction_task(
    target: InputSignal,
    feature_signals: Sequence[InputSignal],
    z_vectors: Mapping[str, np.ndarray],
    seed: int = 0,
    folds: int = 5,
    ks: Sequence[int] = (10, 100),
    lam: float = 0.001,
    lr: float = 0.01,
    iterations: int = 500,
) -> dict:
    """Cross-validated NDCG of a linear ranker predicting ``target``.

    Configurations: the feature signals alone (``"signals"``), and the
    feature signals plus each importance vector (``"signals+<name>"``).
    Columns are standardized with training-fold statistics.
    """
    eligible = target.ids
    for f in feature_signals:
        eligible = np.intersect1d(eligible, f.ids, assume_unique=True)
    if len(eligible) < 10:
        raise TaskError(f"only {len(eligible)} entities observed in the target and every feature")
    tgt = target.restrict(eligible)
    base = [_column(f, eligible) for f in feature_signals]
    configs = {"signals": base}
    for name, z in z_vectors.items():
        configs[f"signals+{name}"] = base + [_column(z, eligible)]

    splits = make_folds(tgt, folds, seed)
    out = {}
    for cname, cols in configs.items():
        x_all = np.column_stack(cols) if cols else np.zeros((len(eligible), 0))
        scores = {k: [] for k in ks}
        for train, test in splits:
            tr = np.searchsorted(eligible, train.ids)
            te = np.searchsorted(eligible, test.ids)
            mu = x_all[tr].mean(axis=0)
            sd = x_all[tr].std(axis=0)
            sd[sd == 0] = 1.0
            x_tr = (x_all[tr] - mu) / sd
            x_te = (x_all[te] - mu) / sd
            w, b = fit_linear_ranker(x_tr, train.vals, lam, lr, iterations)
            pred = x_te @ w + b
            for k in ks:
                scores[k].append(ndcg_aligned(pred, test.vals, k, test.ids))
        out[cname] = {
            f"ndcg@{k}": {"mean": float(np.mean(v)), "std": float(np.std(v)), "folds": v}
            for k, v in scores.items()
        }
    return out


def forecasting_split(kg: KnowledgeGraph, signal: InputSignal, cutoff) -> tuple[InputSignal, InputSignal]:
    """Split entries by entity timestamp: before ``cutoff`` -> train, on/after -> test."""
    if isinstance(cutoff, str):
        cutoff = dt.date.fromisoformat(cutoff)
    before, after, dropped = [], [], 0
    for i in signal.ids.tolist():
        ts = kg.timestamps[i]
        if ts is None:
            dropped += 1
        elif ts < cutoff:
            before.append(i)
        else:
            after.append(i)
    if dropped:
        log.warning("signal %r: %d entities without timestamps excluded", signal.name, dropped)
    if not before or not after:
        raise SplitError(f"signal {signal.name!r}: cutoff {cutoff} leaves an empty side "
                         f"({len(before)} before, {len(after)} after)")
    return signal.restrict(before), signal.restrict(after)


def random_baseline_ndcg(truths: np.ndarray, k: int, trials: int = 1000, seed: Optional[int] = 0) -> np.ndarray:
    """NDCG@k of random rankings of ``truths`` (null distribution)."""
    rng = np.random.default_rng(seed)
    truths = np.asarray(truths, dtype=np.float64)
    return np.array([ndcg_aligned(rng.permutation(len(truths)).astype(float), truths, k) for _ in range(trials)])
