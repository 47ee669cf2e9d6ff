"""In-/out-of-domain NDCG evaluation and the k-fold cross-validation protocol."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ..graph import KnowledgeGraph, NodeFeatures
from ..signals import InputSignal
from .metrics import EvaluationError, make_folds, ndcg_aligned

DEFAULT_KS = (10, 100)
ROW_FIELDS = ("signal", "fold", "k", "ndcg", "domain", "scope", "closed_world", "candidates")


def candidate_ids(kg: KnowledgeGraph, signal: InputSignal, scope_rule: Optional[str] = "auto") -> np.ndarray:
    """Entities a signal is evaluated over.

    ``"auto"`` follows the signal's own scope (all entities when generic),
    ``"generic"`` always uses every entity, anything else names a type.
    """
    if scope_rule == "generic" or (scope_rule == "auto" and signal.scope is None):
        return np.arange(kg.num_entities)
    label = signal.scope if scope_rule == "auto" else scope_rule
    return kg.entities_of_type(label)


def evaluate(
    z,
    signal: InputSignal,
    kg: KnowledgeGraph,
    scope_rule: Optional[str] = "auto",
    closed_world: bool = False,
    ks: Sequence[int] = DEFAULT_KS,
    trained_on: Iterable[str] = (),
    fold: Optional[int] = None,
) -> list[dict]:
    """NDCG@k rows for one signal; gains are the signal's values as given."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (kg.num_entities,):
        raise EvaluationError("z must cover every entity")
    cand = candidate_ids(kg, signal, scope_rule)
    if closed_world:
        ids = cand
        truth = np.zeros(len(cand))
        pos = np.searchsorted(cand, signal.ids)
        inside = (pos < len(cand)) & (cand[np.minimum(pos, len(cand) - 1)] == signal.ids)
        truth[pos[inside]] = signal.vals[inside]
    else:
        keep = np.isin(signal.ids, cand)
        ids, truth = signal.ids[keep], signal.vals[keep]
    if len(ids) == 0:
        raise EvaluationError(f"signal {signal.name!r} has no entities in its candidate set")
    domain = "ID" if signal.name in set(trained_on) else "OOD"
    scope = "GENERIC" if signal.scope is None else signal.scope
    return [
        {
            "signal": signal.name,
            "fold": fold,
            "k": int(k),
            "ndcg": ndcg_aligned(z[ids], truth, int(k), ids),
            "domain": domain,
            "scope": scope,
            "closed_world": bool(closed_world),
            "candidates": int(len(ids)),
        }
        for k in ks
    ]


@dataclass
class EvaluationReport:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def extend(self, rows: Iterable[dict]) -> None:
        self.rows.extend(rows)

    def mean(self, signal: str, k: int) -> float:
        vals = [r["ndcg"] for r in self.rows if r["signal"] == signal and r["k"] == k]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> list[dict]:
        keys = sorted({(r["signal"], r["k"], r["domain"]) for r in self.rows})
        out = []
        for sig, k, dom in keys:
            vals = [r["ndcg"] for r in self.rows if (r["signal"], r["k"], r["domain"]) == (sig, k, dom)]
            out.append({"signal": sig, "k": k, "domain": dom, "mean": float(np.mean(vals)),
                        "std": float(np.std(vals)), "n": len(vals)})
        return out

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "rows": self.rows, "summary": self.summary()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: r.get(k) for k in ROW_FIELDS})
        return buf.getvalue()


def cross_validate(
    kg: KnowledgeGraph,
    features: NodeFeatures,
    signals: Sequence[InputSignal],
    config,
    folds: int = 5,
    ks: Sequence[int] = DEFAULT_KS,
    closed_world: Iterable[str] = (),
    test_only: Iterable[str] = (),
    seed: int = 0,
    metadata: Optional[dict] = None,
) -> tuple[EvaluationReport, list]:
    """k-fold protocol: train the clustering loop on fold-train parts, score fold-test parts.

    Signals in ``test_only`` never enter training and are scored in full on
    every fold. Rows are tagged ID when the signal belongs to the cluster
    whose inference was scored.
    """
    from ..trainer import run_clustering

    closed = set(closed_world)
    held = set(test_only)
    split = {s.name: make_folds(s, folds, seed) for s in signals if s.name not in held}
    report = EvaluationReport(metadata=dict(metadata or {}, folds=folds, seed=seed))
    results = []
    for f in range(folds):
        train = [split[s.name][f][0] for s in signals if s.name in split]
        res = run_clustering(kg, features, train, config)
        results.append(res)
        members = res.primary_cluster.members
        for s in signals:
            target = s if s.name in held else split[s.name][f][1]
            report.extend(evaluate(res.z, target, kg, "auto", s.name in closed, ks, members, f))
    return report, results
