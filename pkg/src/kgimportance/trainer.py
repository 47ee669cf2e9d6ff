"""Cluster training with early stopping and the rebel-aware clustering loop.

Signals start in their own clusters. Each round trains one estimator per
(new) cluster, scores every cross-cluster signal pair by Spearman
correlation (directly on overlapping observations, or against the other
cluster's inferred importance when overlap is too small), and merges
clusters by average linkage above a threshold. Rounds repeat until nothing
merges; a priority policy picks the cluster whose inference is returned.
"""
from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .estimator import EstimatorConfig, EstimatorParams, forward, init_params
from .evalbench.metrics import ndcg_vector
from .graph import KnowledgeGraph, NodeFeatures
from .objective import AdamState, LossConfig, adam_step, sample_edges, value_and_gradients
from .signals import ContractError, InputSignal, SignalSet, overlap_size, spearman

log = logging.getLogger(__name__)

POLICIES = ("size", "quality", "preference")


class TrainingError(Exception):
    pass


class EmptyClusterError(TrainingError):
    pass


class PolicyError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 0.005
    max_iterations: int = 3000
    patience: int = 30
    validation_fraction: float = 0.15
    merge_threshold: float = 0.6
    min_direct_overlap: int = 50
    eval_k: int = 100
    policy: str = "size"
    preferred_signal: Optional[str] = None
    seed: int = 0
    threads: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise TrainingError("validation_fraction must be in (0, 1)")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if not -1 <= self.merge_threshold <= 1:
            raise TrainingError("merge_threshold must be in [-1, 1]")
        if self.policy not in POLICIES:
            raise PolicyError(f"unknown priority policy {self.policy!r}")
        if self.threads < 1:
            raise TrainingError("threads must be >= 1")


def _signal_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def validation_split(signal: InputSignal, fraction: float, seed: int) -> Optional[tuple[InputSignal, InputSignal]]:
    """Seeded (train, validation) split; None if fewer than 2 training entries would remain."""
    n = len(signal)
    n_val = max(1, int(round(fraction * n)))
    if n - n_val < 2:
        return None
    perm = _signal_rng(seed, signal.name).permutation(signal.ids)
    return signal.restrict(perm[n_val:]), signal.restrict(perm[:n_val])


def trainable(signal: InputSignal, config: TrainingConfig) -> bool:
    return validation_split(signal, config.validation_fraction, config.seed) is not None


@dataclass
class TrainResult:
    members: tuple[str, ...]
    params: EstimatorParams
    z: np.ndarray
    best_validation: float
    best_iteration: int
    iterations: int
    stopped_early: bool
    log: list = field(default_factory=list)


def train_single_cluster(
    kg: KnowledgeGraph,
    features: NodeFeatures,
    signals: Sequence[InputSignal],
    config: TrainingConfig,
    init: Optional[EstimatorParams] = None,
    on_log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Full-batch Adam on the MAP loss with validation-NDCG early stopping.

    Returns the parameters from the best validation evaluation. Iteration i
    of the log evaluates the parameters after i optimizer steps.
    """
    train, val, members = [], [], []
    for sig in signals:
        if not sig.preprocessed:
            raise ContractError(f"signal {sig.name!r} must be preprocessed before training")
        split = validation_split(sig, config.validation_fraction, config.seed)
        if split is None:
            log.warning("signal %r too small to train on (%d entries); excluded", sig.name, len(sig))
            continue
        train.append(split[0])
        val.append(split[1])
        members.append(sig.name)
    if not members:
        raise EmptyClusterError("no trainable signals in cluster")

    params = init.copy() if init is not None else init_params(kg, features.dim, config.estimator, config.seed)
    config.loss.check_dims(params)
    state = AdamState.zeros(params)
    edge_rng = np.random.default_rng([config.seed, 7])
    best, best_params, best_it, bad = -np.inf, params.copy(), 0, 0
    history = []
    stopped_early = False
    it = 0
    while True:
        sample = None
        if config.loss.nu > 0:
            sample = sample_edges(kg, config.loss.edge_sample_fraction, edge_rng)
        terms, grads, cache = value_and_gradients(
            params, kg, features, train, config.loss, config.estimator, sample
        )
        score = float(np.mean([ndcg_vector(cache.z, v, config.eval_k) for v in val]))
        if score > best:
            best, best_params, best_it, bad = score, params.copy(), it, 0
        else:
            bad += 1
        entry = {"iteration": it, **terms.as_dict(), "val_ndcg": score, "best_val_ndcg": best}
        history.append(entry)
        if on_log is not None:
            on_log(entry)
        if bad >= config.patience:
            stopped_early = True
            break
        if it >= config.max_iterations:
            break
        adam_step(state, params, grads, config.lr)
        it += 1

    z = forward(best_params, kg, features, config.estimator)
    return TrainResult(tuple(members), best_params, z, best, best_it, it, stopped_early, history)


@dataclass
class SignalCluster:
    members: tuple[str, ...]
    params: EstimatorParams
    z: np.ndarray
    quality: float
    log: list = field(default_factory=list, repr=False)
    best_iteration: int = 0

    @property
    def size(self) -> int:
        return len(self.members)

    @classmethod
    def from_result(cls, res: TrainResult) -> "SignalCluster":
        return cls(res.members, res.params, res.z, float(res.best_validation), res.log, res.best_iteration)


def pair_similarity(
    sig_i: InputSignal, sig_j: InputSignal, z_i: Optional[np.ndarray], z_j: Optional[np.ndarray], min_direct_overlap: int
) -> Optional[float]:
    """Similarity of two signals from different clusters.

    ``z_i``/``z_j`` are the inferred importance of the clusters holding
    ``sig_i``/``sig_j``. Undefined comparisons yield None.
    """
    if overlap_size(sig_i, sig_j) >= min_direct_overlap:
        return spearman(sig_i, sig_j)
    cands = []
    if z_j is not None:
        cands.append(spearman(sig_i, InputSignal("_z", sig_i.ids, np.maximum(z_j[sig_i.ids], 0.0))))
    if z_i is not None:
        cands.append(spearman(sig_j, InputSignal("_z", sig_j.ids, np.maximum(z_i[sig_j.ids], 0.0))))
    cands = [c for c in cands if c is not None]
    return max(cands) if cands else None


def cluster_similarity(a: SignalCluster, b: SignalCluster, signals, config: TrainingConfig) -> Optional[float]:
    """Mean of defined cross-pair signal similarities; None if all undefined."""
    sims = [
        pair_similarity(signals[i], signals[j], a.z, b.z, config.min_direct_overlap)
        for i in a.members
        for j in b.members
    ]
    sims = [s for s in sims if s is not None]
    return float(np.mean(sims)) if sims else None


def select_primary_cluster(clusters: Sequence[SignalCluster], policy: str = "size", preferred: Optional[str] = None) -> int:
    if not clusters:
        raise PolicyError("no clusters to choose from")
    if policy == "size":
        key = lambda k: (-clusters[k].size, -clusters[k].quality, sorted(clusters[k].members))
    elif policy == "quality":
        key = lambda k: (-clusters[k].quality, -clusters[k].size, sorted(clusters[k].members))
    elif policy == "preference":
        for k, c in enumerate(clusters):
            if preferred in c.members:
                return k
        raise PolicyError(f"preferred signal {preferred!r} is not in any cluster")
    else:
        raise PolicyError(f"unknown priority policy {policy!r}")
    return min(range(len(clusters)), key=key)


@dataclass
class ClusteringResult:
    clusters: list[SignalCluster]
    history: list[dict]
    primary: int
    signals: dict = field(default_factory=dict, repr=False)

    @property
    def z(self) -> np.ndarray:
        return self.clusters[self.primary].z

    @property
    def primary_cluster(self) -> SignalCluster:
        return self.clusters[self.primary]

    def cluster_of(self, name: str) -> int:
        for k, c in enumerate(self.clusters):
            if name in c.members:
                return k
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "clusters": [
                {"members": list(c.members), "size": c.size, "quality": c.quality, "best_iteration": c.best_iteration}
                for c in self.clusters
            ],
            "history": self.history,
            "primary": self.primary,
            "primary_members": list(self.primary_cluster.members),
        }


def _order(names: Iterable[str], ranking: dict[str, int]) -> tuple[str, ...]:
    return tuple(sorted(names, key=ranking.__getitem__))


def _agglomerate(groups: list[list[int]], pair_sim, threshold: float) -> tuple[list[list[int]], list[dict]]:
    """Average-linkage merging of groups while the best linkage exceeds ``threshold``."""
    merges = []

    def linkage(g1, g2):
        vals = [pair_sim[(a, b)] for a in g1 for b in g2 if pair_sim.get((a, b)) is not None]
        return float(np.mean(vals)) if vals else None

    groups = [list(g) for g in groups]
    while len(groups) > 1:
        best, best_pair = None, None
        for x in range(len(groups)):
            for y in range(x + 1, len(groups)):
                s = linkage(groups[x], groups[y])
                if s is not None and s > threshold and (best is None or s > best):
                    best, best_pair = s, (x, y)
        if best_pair is None:
            break
        x, y = best_pair
        merges.append({"left": groups[x], "right": groups[y], "linkage": best})
        groups[x] = groups[x] + groups[y]
        del groups[y]
    return groups, merges


def _train_clusters(kg, features, signals, todo, warm, config) -> dict:
    def job(members):
        res = train_single_cluster(kg, features, [signals[m] for m in members], config, init=warm.get(members))
        return members, SignalCluster.from_result(res)

    if config.threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return dict(pool.map(job, todo))
    return dict(job(m) for m in todo)


def _run_rounds(kg, features, signals: dict, partition: list[tuple[str, ...]], trained: dict, warm: dict,
                config: TrainingConfig, history: list) -> ClusteringResult:
    ranking = {name: k for k, name in enumerate(signals)}
    while True:
        todo = [m for m in partition if m not in trained]
        trained.update(_train_clusters(kg, features, signals, todo, warm, config))
        clusters = [trained[m] for m in partition]

        pair_sim = {}
        for a in range(len(clusters)):
            for b in range(len(clusters)):
                if a == b:
                    continue
                for i in clusters[a].members:
                    for j in clusters[b].members:
                        if (j, i) in pair_sim:
                            pair_sim[(i, j)] = pair_sim[(j, i)]
                        else:
                            pair_sim[(i, j)] = pair_similarity(
                                signals[i], signals[j], clusters[a].z, clusters[b].z, config.min_direct_overlap
                            )
        names = [n for c in clusters for n in c.members]
        index = {n: k for k, n in enumerate(names)}
        sig_matrix = [[None if (i, j) not in pair_sim else pair_sim[(i, j)] for j in names] for i in names]
        clus_matrix = [
            [None if a == b else cluster_similarity(clusters[a], clusters[b], signals, config) for b in range(len(clusters))]
            for a in range(len(clusters))
        ]
        groups, merges = _agglomerate([[index[n] for n in c.members] for c in clusters],
                                      {(index[i], index[j]): s for (i, j), s in pair_sim.items()},
                                      config.merge_threshold)
        history.append({
            "round": len(history) + 1,
            "clusters": [list(c.members) for c in clusters],
            "signal_order": names,
            "signal_similarity": sig_matrix,
            "cluster_similarity": clus_matrix,
            "merges": [
                {"left": [names[k] for k in m["left"]], "right": [names[k] for k in m["right"]], "linkage": m["linkage"]}
                for m in merges
            ],
        })
        log.info("round %d: %d clusters, %d merges", len(history), len(clusters), len(merges))
        if not merges:
            break
        new_partition = []
        for g in groups:
            members = _order((names[k] for k in g), ranking)
            if members not in trained:
                parts = [c for c in clusters if set(c.members) <= set(members)]
                largest = max(parts, key=lambda c: (c.size, -partition.index(c.members)))
                warm[members] = largest.params
            new_partition.append(members)
        partition = sorted(new_partition, key=lambda m: ranking[m[0]])

    clusters = [trained[m] for m in partition]
    primary = select_primary_cluster(clusters, config.policy, config.preferred_signal)
    return ClusteringResult(clusters, history, primary, dict(signals))


def _usable(signals: Iterable[InputSignal], config: TrainingConfig) -> list[InputSignal]:
    out = []
    for s in signals:
        if trainable(s, config):
            out.append(s)
        else:
            log.warning("signal %r has too few entries (%d); excluded", s.name, len(s))
    return out


def run_clustering(kg: KnowledgeGraph, features: NodeFeatures, signals, config: TrainingConfig) -> ClusteringResult:
    """Cluster signals by agreement, train one estimator per cluster, return the primary inference."""
    sigs = _usable(signals, config)
    if not sigs:
        raise EmptyClusterError("no usable signals")
    by_name = {s.name: s for s in sigs}
    partition = [(s.name,) for s in sigs]
    return _run_rounds(kg, features, by_name, partition, {}, {}, config, [])


def add_signals_incremental(result: ClusteringResult, new_signals: Sequence[InputSignal], kg: KnowledgeGraph,
                            features: NodeFeatures, config: TrainingConfig) -> ClusteringResult:
    """Append new signals as singleton clusters and resume the merge loop.

    Existing clusters keep their trained estimators; merged clusters start
    from the parameters of their largest constituent.
    """
    new_signals = list(new_signals)
    if not new_signals:
        return result
    names = [s.name for s in new_signals]
    if len(set(names)) != len(names) or any(n in result.signals for n in names):
        raise ContractError("incremental signals must have new, unique names")
    sigs = _usable(new_signals, config)
    signals = dict(result.signals)
    signals.update((s.name, s) for s in sigs)
    trained = {c.members: c for c in result.clusters}
    partition = [c.members for c in result.clusters] + [(s.name,) for s in sigs]
    return _run_rounds(kg, features, signals, partition, trained, {}, config, list(result.history))
