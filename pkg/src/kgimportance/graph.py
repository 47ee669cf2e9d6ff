"""Knowledge-graph data model, node features, and file ingestion."""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

SELF_PREDICATE = "SELF"
DEFAULT_TYPE = "entity"

OUT, IN, SELF = 1, -1, 0


class GraphError(Exception):
    pass


class ParseError(GraphError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class EmptyGraphError(GraphError):
    pass


class DimensionError(GraphError):
    pass


def parse_timestamp(text: str) -> Optional[dt.date]:
    text = text.strip()
    if not text:
        return None
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        return dt.datetime.fromisoformat(text).date()


@dataclass(frozen=True)
class EdgeArrays:
    """Flat neighbor-edge arrays used for attention, grouped by receiving node.

    Entries are sorted by ``node``; ``offsets[i]:offsets[i+1]`` spans node i.
    Every node owns exactly one SELF entry.
    """

    node: np.ndarray
    other: np.ndarray
    predicate: np.ndarray
    ordinal: np.ndarray
    direction: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return len(self.node)


class KnowledgeGraph:
    """Directed multigraph of typed entities and predicate-labelled triples.

    Ids are dense integers in first-appearance order. Parallel edges are
    kept as distinct triples. The SELF predicate id is ``num_predicates``;
    it never appears in ``triples``.
    """

    def __init__(
        self,
        entity_names: Sequence[str],
        predicate_names: Sequence[str],
        triples: np.ndarray,
        entity_types: Optional[Sequence[str]] = None,
        timestamps: Optional[Sequence[Optional[dt.date]]] = None,
    ):
        self.entity_names = list(entity_names)
        self.predicate_names = list(predicate_names)
        self.entity_index = {n: i for i, n in enumerate(self.entity_names)}
        self.predicate_index = {n: i for i, n in enumerate(self.predicate_names)}
        if len(self.entity_index) != len(self.entity_names):
            raise GraphError("duplicate entity names")
        if len(self.predicate_index) != len(self.predicate_names):
            raise GraphError("duplicate predicate names")
        n = len(self.entity_names)
        self.entity_types = list(entity_types) if entity_types is not None else [DEFAULT_TYPE] * n
        self.timestamps = list(timestamps) if timestamps is not None else [None] * n
        if len(self.entity_types) != n or len(self.timestamps) != n:
            raise GraphError("entity metadata length mismatch")

        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        triples.setflags(write=False)
        self.triples = triples
        self.in_degree = np.bincount(triples[:, 2], minlength=n).astype(np.int64)
        self.out_degree = np.bincount(triples[:, 0], minlength=n).astype(np.int64)
        self._edges = None

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_names)

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    @property
    def self_predicate(self) -> int:
        return self.num_predicates

    def entities_of_type(self, type_label: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.entity_types) if t == type_label], dtype=np.int64)

    def neighbors(self, i: int) -> list[tuple[int, int, int, int]]:
        """Data edges touching node i as ``(other, ordinal, predicate, direction)``."""
        e = self.edges
        lo, hi = e.offsets[i], e.offsets[i + 1]
        return [
            (int(e.other[k]), int(e.ordinal[k]), int(e.predicate[k]), int(e.direction[k]))
            for k in range(lo, hi)
            if e.direction[k] != SELF
        ]

    @property
    def edges(self) -> EdgeArrays:
        if self._edges is None:
            self._edges = self._build_edges()
        return self._edges

    def _build_edges(self) -> EdgeArrays:
        n, t = self.num_entities, self.num_triples
        s, p, o = self.triples[:, 0], self.triples[:, 1], self.triples[:, 2]
        ords = np.arange(t, dtype=np.int64)
        nodes = np.arange(n, dtype=np.int64)
        node = np.concatenate([s, o, nodes])
        other = np.concatenate([o, s, nodes])
        pred = np.concatenate([p, p, np.full(n, self.self_predicate, dtype=np.int64)])
        ordinal = np.concatenate([ords, ords, t + nodes])
        direction = np.concatenate(
            [np.full(t, OUT, dtype=np.int8), np.full(t, IN, dtype=np.int8), np.full(n, SELF, dtype=np.int8)]
        )
        order = np.argsort(node, kind="stable")
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(node, minlength=n), out=offsets[1:])
        arrays = [a[order] for a in (node, other, pred, ordinal, direction)]
        for a in arrays:
            a.setflags(write=False)
        return EdgeArrays(*arrays, offsets=offsets)

    def triple_lines(self) -> list[str]:
        return [
            f"{self.entity_names[s]}\t{self.predicate_names[p]}\t{self.entity_names[o]}"
            for s, p, o in self.triples.tolist()
        ]

    def permuted(self, perm: np.ndarray) -> "KnowledgeGraph":
        """Relabel entities so that old id ``i`` becomes new id ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        t = self.triples.copy()
        t[:, 0] = perm[t[:, 0]]
        t[:, 2] = perm[t[:, 2]]
        return KnowledgeGraph(
            [self.entity_names[k] for k in inv],
            self.predicate_names,
            t,
            [self.entity_types[k] for k in inv],
            [self.timestamps[k] for k in inv],
        )


@dataclass
class NodeFeatures:
    matrix: np.ndarray
    missing: tuple[str, ...] = ()
    skipped: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DimensionError("feature matrix must be 2-D")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def warning_count(self) -> int:
        return len(self.missing)


def _data_lines(path: Path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def load_metadata(path) -> dict[str, tuple[str, Optional[dt.date]]]:
    meta = {}
    for lineno, line in _data_lines(Path(path)):
        parts = line.split("\t")
        if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
            raise ParseError(path, lineno, "expected entity<TAB>type[<TAB>timestamp]")
        try:
            ts = parse_timestamp(parts[2]) if len(parts) == 3 else None
        except ValueError as exc:
            raise ParseError(path, lineno, f"bad timestamp: {exc}") from None
        meta[parts[0]] = (parts[1], ts)
    return meta


def load_triples(path, metadata_path=None) -> KnowledgeGraph:
    """Read a tab-separated triples file (plus optional metadata sidecar)."""
    path = Path(path)
    entities: dict[str, int] = {}
    predicates: dict[str, int] = {}
    rows = []
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
        s, p, o = parts
        if not s or not p or not o:
            raise ParseError(path, lineno, "empty field")
        if p == SELF_PREDICATE:
            raise ParseError(path, lineno, f"predicate name {SELF_PREDICATE!r} is reserved")
        si = entities.setdefault(s, len(entities))
        pi = predicates.setdefault(p, len(predicates))
        oi = entities.setdefault(o, len(entities))
        rows.append((si, pi, oi))
    if not rows:
        raise EmptyGraphError(f"{path}: no triples")

    meta = load_metadata(metadata_path) if metadata_path else {}
    for name in meta:
        entities.setdefault(name, len(entities))
    names = list(entities)
    types = [meta.get(n, (DEFAULT_TYPE, None))[0] for n in names]
    stamps = [meta.get(n, (DEFAULT_TYPE, None))[1] for n in names]
    return KnowledgeGraph(names, list(predicates), np.array(rows, dtype=np.int64), types, stamps)


def write_triples(kg: KnowledgeGraph, path) -> None:
    Path(path).write_text("".join(line + "\n" for line in kg.triple_lines()), encoding="utf-8")


def write_metadata(kg: KnowledgeGraph, path) -> None:
    lines = []
    for name, typ, ts in zip(kg.entity_names, kg.entity_types, kg.timestamps):
        lines.append(f"{name}\t{typ}\t{ts.isoformat()}" if ts else f"{name}\t{typ}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_features(path, kg: KnowledgeGraph) -> NodeFeatures:
    """Read ``entity<TAB>v1 v2 ... vF`` rows aligned to ``kg`` entity ids.

    Entities absent from the file get a zero row and are listed in
    ``missing``; unknown entity names are skipped and listed in ``skipped``.
    """
    path = Path(path)
    dim = None
    rows: dict[int, np.ndarray] = {}
    skipped = []
    for lineno, line in _data_lines(path):
        name, sep, rest = line.partition("\t")
        if not sep:
            raise ParseError(path, lineno, "expected entity<TAB>values")
        try:
            vec = np.array([float(v) for v in rest.split()], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise DimensionError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
        idx = kg.entity_index.get(name)
        if idx is None:
            log.warning("%s:%d: unknown entity %r skipped", path, lineno, name)
            skipped.append(name)
            continue
        rows[idx] = vec
    if dim is None:
        raise DimensionError(f"{path}: no feature rows")
    mat = np.zeros((kg.num_entities, dim))
    for idx, vec in rows.items():
        mat[idx] = vec
    missing = tuple(kg.entity_names[i] for i in range(kg.num_entities) if i not in rows)
    if missing:
        log.warning("%d entities have no features; using zero vectors", len(missing))
    return NodeFeatures(mat, missing=missing, skipped=tuple(skipped))


def write_features(kg: KnowledgeGraph, features: NodeFeatures, path) -> None:
    lines = [
        name + "\t" + " ".join(repr(float(v)) for v in row)
        for name, row in zip(kg.entity_names, features.matrix)
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def validate(kg: KnowledgeGraph, features: Optional[NodeFeatures], signals=None) -> dict:
    """Check cross-object invariants and report counts and signal coverage."""
    violations = []
    n = kg.num_entities
    t = kg.triples
    if len(t):
        bad = (t[:, 0] < 0) | (t[:, 0] >= n) | (t[:, 2] < 0) | (t[:, 2] >= n)
        bad |= (t[:, 1] < 0) | (t[:, 1] >= kg.num_predicates)
        for k in np.flatnonzero(bad):
            violations.append({"kind": "dangling_triple", "detail": f"triple #{k} references unknown ids"})
    if features is not None:
        if features.matrix.shape[0] != n:
            violations.append(
                {"kind": "feature_rows", "detail": f"{features.matrix.shape[0]} rows for {n} entities"}
            )
        else:
            for i in np.flatnonzero(~np.isfinite(features.matrix).all(axis=1)):
                violations.append({"kind": "nonfinite_feature", "detail": kg.entity_names[i]})
    coverage = {}
    if signals is not None:
        for sig_name, ents in sorted(getattr(signals, "unknown_entities", {}).items()):
            for ent in ents:
                violations.append(
                    {"kind": "unknown_signal_entity", "detail": f"signal {sig_name!r}: entity {ent!r} not in graph"}
                )
        for sig in signals:
            ids = sig.ids
            if len(ids) and (ids.min() < 0 or ids.max() >= n):
                violations.append({"kind": "dangling_signal_id", "detail": sig.name})
                continue
            if not np.all(np.isfinite(sig.vals)) or np.any(sig.vals < 0):
                violations.append({"kind": "bad_signal_value", "detail": sig.name})
            if sig.scope is not None:
                wrong = [kg.entity_names[i] for i in ids if kg.entity_types[i] != sig.scope]
                for ent in wrong:
                    violations.append(
                        {"kind": "scope_mismatch", "detail": f"signal {sig.name!r}: {ent!r} is not {sig.scope!r}"}
                    )
            coverage[sig.name] = 100.0 * len(ids) / n if n else 0.0
    return {
        "violations": violations,
        "num_entities": n,
        "num_predicates": kg.num_predicates,
        "num_triples": kg.num_triples,
        "coverage_percent": coverage,
    }
