"""Synthetic knowledge graphs with a known latent importance.

Signals are noisy monotone transforms of the latent; rebels are permutations
of a coherent signal's values and so carry no latent information.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.stats import norm, rankdata

from ..graph import KnowledgeGraph, NodeFeatures, write_features, write_metadata, write_triples
from ..signals import InputSignal, SignalSet, write_signals

TRANSFORMS = ("identity", "square", "exp")


@dataclass(frozen=True)
class SignalSpec:
    name: str
    transform: str = "identity"
    noise: float = 0.1
    fraction: float = 0.2
    scope: Optional[str] = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError("observation fraction must be in (0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def default_signals(n: int = 3, noise: float = 0.1, fraction: float = 0.2) -> tuple[SignalSpec, ...]:
    return tuple(SignalSpec(f"s{k + 1}", TRANSFORMS[k % 3], noise, fraction) for k in range(n))


@dataclass(frozen=True)
class SynthConfig:
    num_nodes: int = 2000
    num_predicates: int = 5
    edges_per_node: int = 3
    num_types: int = 1
    latent_mu: float = 0.0
    latent_sigma: float = 1.0
    signals: tuple[SignalSpec, ...] = field(default_factory=default_signals)
    num_rebels: int = 0
    feature_noise: float = 1.0
    feature_scale: float = 0.25
    num_features: int = 16
    smoothing: int = 2
    degree_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_nodes < 2 or self.edges_per_node < 1 or self.num_predicates < 1:
            raise ValueError("need >= 2 nodes, >= 1 edge per node, >= 1 predicate")
        if self.num_rebels and not self.signals:
            raise ValueError("rebels need at least one coherent signal to permute")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthDataset:
    kg: KnowledgeGraph
    features: NodeFeatures
    signals: SignalSet
    latent: np.ndarray
    coherent: list[str]
    rebels: list[str]


def _transform(kind: str, z: np.ndarray, scale: float) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "square":
        return z * z
    return np.exp(z / scale)


def _attach(rng, cfg: SynthConfig) -> np.ndarray:
    n, m = cfg.num_nodes, cfg.edges_per_node
    degree = np.zeros(n)
    rows = []
    for t in range(1, n):
        w = degree[:t] + 1.0
        targets = rng.choice(t, size=m, p=w / w.sum())
        preds = rng.integers(cfg.num_predicates, size=m)
        forward = rng.random(m) < 0.8
        for tgt, p, fwd in zip(targets.tolist(), preds.tolist(), forward.tolist()):
            rows.append((t, p, tgt) if fwd else (tgt, p, t))
            degree[tgt] += 1
        degree[t] += m
    return np.array(rows, dtype=np.int64)


def _latent_score(rng, cfg: SynthConfig, triples: np.ndarray) -> np.ndarray:
    """Graph-smoothed Gaussian field plus a log in-degree term, mapped to exact normal quantiles."""
    n = cfg.num_nodes
    adj = sp.csr_matrix((np.ones(len(triples)), (triples[:, 0], triples[:, 2])), shape=(n, n))
    adj = adj + adj.T + sp.identity(n)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    field_ = rng.standard_normal(n)
    for _ in range(cfg.smoothing):
        field_ = adj @ field_ / deg
    field_ = (field_ - field_.mean()) / (field_.std() or 1.0)
    indeg = np.log1p(np.bincount(triples[:, 2], minlength=n))
    indeg = (indeg - indeg.mean()) / (indeg.std() or 1.0)
    score = field_ + cfg.degree_weight * indeg
    return norm.ppf((rankdata(score) - 0.5) / n)


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_nodes
    types = [f"t{k}" for k in rng.integers(cfg.num_types, size=n)]
    triples = _attach(rng, cfg)
    log_latent = cfg.latent_mu + cfg.latent_sigma * _latent_score(rng, cfg, triples)
    latent = np.exp(log_latent)
    start = dt.date(2000, 1, 1)
    kg = KnowledgeGraph(
        [f"e{i}" for i in range(n)],
        [f"p{k}" for k in range(cfg.num_predicates)],
        triples,
        types,
        [start + dt.timedelta(days=i) for i in range(n)],
    )

    std = log_latent.std() or 1.0
    standardized = (log_latent - log_latent.mean()) / std
    loading = rng.standard_normal(cfg.num_features)
    x = np.outer(standardized, loading) + cfg.feature_noise * rng.standard_normal((n, cfg.num_features))
    x *= cfg.feature_scale

    scale = float(latent.mean())
    all_ids = np.arange(n)
    sigs = []
    for spec in cfg.signals:
        cand = all_ids if spec.scope is None else all_ids[np.array([t == spec.scope for t in types])]
        size = max(2, int(round(spec.fraction * len(cand))))
        ids = np.sort(rng.choice(cand, size=min(size, len(cand)), replace=False))
        vals = _transform(spec.transform, latent[ids], scale) * np.exp(spec.noise * rng.standard_normal(len(ids)))
        sigs.append(InputSignal(spec.name, ids, vals, spec.scope))
    rebels = []
    for r in range(cfg.num_rebels):
        src_spec = cfg.signals[r % len(cfg.signals)]
        src = sigs[r % len(cfg.signals)]
        cand = all_ids if src_spec.scope is None else all_ids[np.array([t == src_spec.scope for t in types])]
        ids = np.sort(rng.choice(cand, size=len(src), replace=False))
        name = f"rebel{r + 1}"
        sigs.append(InputSignal(name, ids, rng.permutation(src.vals), src_spec.scope))
        rebels.append(name)
    return SynthDataset(kg, NodeFeatures(x), SignalSet(sigs), latent, [s.name for s in cfg.signals], rebels)


DATASET_FILES = ("triples.tsv", "metadata.tsv", "features.tsv", "signals.tsv", "latent.tsv")


def write_dataset(ds: SynthDataset, outdir, cfg: Optional[SynthConfig] = None) -> dict:
    """Serialize in the regular input formats and return a manifest with sha256 checksums."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_triples(ds.kg, out / "triples.tsv")
    write_metadata(ds.kg, out / "metadata.tsv")
    write_features(ds.kg, ds.features, out / "features.tsv")
    write_signals(ds.kg, ds.signals, out / "signals.tsv")
    (out / "latent.tsv").write_text(
        "".join(f"{name}\t{v!r}\n" for name, v in zip(ds.kg.entity_names, ds.latent.tolist())), encoding="utf-8"
    )
    manifest = {
        "files": {f: hashlib.sha256((out / f).read_bytes()).hexdigest() for f in DATASET_FILES},
        "coherent": ds.coherent,
        "rebels": ds.rebels,
        "config": cfg.to_dict() if cfg is not None else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest
