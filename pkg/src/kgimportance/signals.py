"""Partial importance signals: storage, preprocessing, top-one probabilities, rank correlation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .graph import KnowledgeGraph, ParseError

log = logging.getLogger(__name__)

GENERIC = None


class SignalError(Exception):
    pass


class ContractError(SignalError):
    pass


class UnknownSignalError(SignalError, KeyError):
    def __str__(self):
        return f"unknown signal: {self.args[0]}"


@dataclass(frozen=True)
class InputSignal:
    """Named partial map entity-id -> non-negative value.

    ``ids`` is strictly ascending; ``vals`` is aligned with it. ``scope`` is an
    entity-type label, or ``None`` for a generic signal.
    """

    name: str
    ids: np.ndarray
    vals: np.ndarray
    scope: Optional[str] = GENERIC
    preprocessed: bool = False

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        if ids.shape != vals.shape or ids.ndim != 1:
            raise ContractError(f"{self.name}: ids/vals shape mismatch")
        if len(ids) > 1 and np.any(np.diff(ids) <= 0):
            order = np.argsort(ids, kind="stable")
            ids, vals = ids[order], vals[order]
            if np.any(np.diff(ids) == 0):
                raise ContractError(f"{self.name}: duplicate entity ids")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ContractError(f"{self.name}: values must be finite and non-negative")
        ids.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vals", vals)

    @classmethod
    def from_mapping(cls, name, values: Mapping[int, float], scope=GENERIC, preprocessed=False):
        ids = np.array(sorted(values), dtype=np.int64)
        return cls(name, ids, np.array([values[i] for i in ids.tolist()], dtype=np.float64), scope, preprocessed)

    def __len__(self):
        return len(self.ids)

    @property
    def values(self) -> dict[int, float]:
        return dict(zip(self.ids.tolist(), self.vals.tolist()))

    @property
    def is_generic(self) -> bool:
        return self.scope is None

    def restrict(self, ids: Iterable[int], name: Optional[str] = None) -> "InputSignal":
        """Sub-signal on the given entity ids (must be a subset of the domain)."""
        ids = np.asarray(sorted(set(int(i) for i in ids)), dtype=np.int64)
        pos = np.searchsorted(self.ids, ids)
        if len(ids) and (np.any(pos >= len(self.ids)) or np.any(self.ids[np.minimum(pos, len(self.ids) - 1)] != ids)):
            raise ContractError(f"{self.name}: restriction outside domain")
        return replace(self, name=name or self.name, ids=ids, vals=self.vals[pos])

    def renamed(self, name: str) -> "InputSignal":
        return replace(self, name=name)


@dataclass
class SignalSet:
    signals: list[InputSignal]
    unknown_entities: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        names = [s.name for s in self.signals]
        if len(set(names)) != len(names):
            raise ContractError("signal names must be unique")

    def __iter__(self) -> Iterator[InputSignal]:
        return iter(self.signals)

    def __len__(self):
        return len(self.signals)

    def __contains__(self, name):
        return any(s.name == name for s in self.signals)

    def __getitem__(self, name: str) -> InputSignal:
        for s in self.signals:
            if s.name == name:
                return s
        raise UnknownSignalError(name)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.signals]

    def subset(self, names: Sequence[str]) -> "SignalSet":
        return SignalSet([self[n] for n in names])


def infer_scope(kg: KnowledgeGraph, ids: Iterable[int]) -> Optional[str]:
    types = {kg.entity_types[i] for i in ids}
    return types.pop() if len(types) == 1 else GENERIC


def load_signals(path, kg: KnowledgeGraph, scopes: Optional[Mapping[str, Optional[str]]] = None) -> SignalSet:
    """Read ``signal<TAB>entity<TAB>value`` lines into a SignalSet.

    Scope is inferred from the keyed entity types unless ``scopes`` overrides
    it (use ``"GENERIC"`` or ``None`` to force a generic scope).
    """
    path = Path(path)
    grouped: dict[str, dict[int, float]] = {}
    unknown: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise ParseError(path, lineno, "expected signal<TAB>entity<TAB>value")
            name, ent, text = parts
            try:
                value = float(text)
            except ValueError:
                raise ParseError(path, lineno, f"bad value {text!r}") from None
            if not math.isfinite(value) or value < 0:
                raise ParseError(path, lineno, f"signal values must be finite and >= 0, got {text}")
            idx = kg.entity_index.get(ent)
            if idx is None:
                log.warning("%s:%d: unknown entity %r in signal %r skipped", path, lineno, ent, name)
                unknown.setdefault(name, []).append(ent)
                grouped.setdefault(name, {})
                continue
            entries = grouped.setdefault(name, {})
            if idx in entries:
                log.warning("%s:%d: duplicate entry for (%s, %s); last value wins", path, lineno, name, ent)
            entries[idx] = value
    scopes = dict(scopes or {})
    out = []
    for name, entries in grouped.items():
        if name in scopes:
            scope = scopes[name]
            scope = None if scope in (None, "GENERIC") else scope
        else:
            scope = infer_scope(kg, entries)
        out.append(InputSignal.from_mapping(name, entries, scope))
    return SignalSet(out, unknown)


def write_signals(kg: KnowledgeGraph, signals: Iterable[InputSignal], path) -> None:
    lines = []
    for sig in signals:
        for i, v in zip(sig.ids.tolist(), sig.vals.tolist()):
            lines.append(f"{sig.name}\t{kg.entity_names[i]}\t{v!r}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def preprocess_log(signal: InputSignal, log_skip: Iterable[str] = ()) -> InputSignal:
    """Replace each value v with ln(1+v), unless the signal is listed in ``log_skip``."""
    if signal.preprocessed:
        raise ContractError(f"signal {signal.name!r} is already preprocessed")
    if signal.name in set(log_skip):
        return replace(signal, preprocessed=True)
    return replace(signal, vals=np.log1p(signal.vals), preprocessed=True)


def preprocess_all(signals: SignalSet, log_skip: Iterable[str] = ()) -> SignalSet:
    skip = set(log_skip)
    return SignalSet([preprocess_log(s, skip) for s in signals], dict(signals.unknown_entities))


def top_one_probabilities(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise SignalError("top-one probabilities of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


Paired = Union[InputSignal, Mapping[int, float]]


def _as_arrays(x: Paired) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, InputSignal):
        return x.ids, x.vals
    keys = np.array(sorted(x), dtype=np.int64)
    return keys, np.array([x[k] for k in keys.tolist()], dtype=np.float64)


def spearman_arrays(a, b) -> Optional[float]:
    """Tie-aware Spearman coefficient of two aligned vectors; None when undefined."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(a) != len(b):
        return None
    ra = rankdata(a) - (len(a) + 1) / 2.0
    rb = rankdata(b) - (len(b) + 1) / 2.0
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        return None
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


def spearman(x: Paired, y: Paired) -> Optional[float]:
    """Spearman correlation over the key overlap of two partial maps.

    Returns None (undefined similarity) if the overlap has fewer than two
    entries or either side is constant there.
    """
    xi, xv = _as_arrays(x)
    yi, yv = _as_arrays(y)
    common, ix, iy = np.intersect1d(xi, yi, assume_unique=True, return_indices=True)
    if len(common) < 2:
        return None
    return spearman_arrays(xv[ix], yv[iy])


def overlap_size(x: InputSignal, y: InputSignal) -> int:
    return len(np.intersect1d(x.ids, y.ids, assume_unique=True))
