"""Predicate-aware attentive importance estimator (forward pass and checkpoints).

Scalar importance h is propagated over each node's neighboring edges (both
directions plus one SELF edge) with edge-level attention whose logits see
both endpoint scores and the edge's predicate embedding. The final layer is
rescaled by an ELU of log in-degree and clamped with ReLU.

Layers and heads are indexed from 0 throughout this package.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import KnowledgeGraph, NodeFeatures

CHECKPOINT_VERSION = 1


class EstimatorError(Exception):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    layers: int = 2
    heads: int = 4
    pred_dim: int = 10
    proj_dim: Optional[int] = None  # None -> ceil(0.75 * F)
    epsilon: float = 1e-8
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.pred_dim < 1:
            raise EstimatorError("layers, heads and pred_dim must be >= 1")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise EstimatorError("proj_dim must be >= 1")
        if not self.epsilon > 0:
            raise EstimatorError("epsilon must be > 0")

    def projection_dim(self, num_features: int) -> int:
        if self.proj_dim is not None:
            return self.proj_dim
        return max(1, math.ceil(0.75 * num_features))


BLOCKS = ("W_g", "b_g", "w_out", "b_out", "pred_emb", "attn", "alpha", "beta")


@dataclass
class EstimatorParams:
    """All learnable estimator parameters.

    ``pred_emb`` has one row per predicate plus a trailing SELF row.
    ``attn[l, k]`` is the attention vector of layer l, head k, laid out as
    ``[w_self | w_predicate (pred_dim) | w_neighbor]``.
    Scalars are stored as 0-d arrays so every block updates in place.
    """

    W_g: np.ndarray
    b_g: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    pred_emb: np.ndarray
    attn: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for name in BLOCKS:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        fp, f = self.W_g.shape
        if self.b_g.shape != (fp,) or self.w_out.shape != (fp,):
            raise EstimatorError("projection/scorer dimensions disagree")
        if self.attn.ndim != 3 or self.attn.shape[2] != self.pred_emb.shape[1] + 2:
            raise EstimatorError("attention vectors must have length 2 + pred_dim")
        for name in ("b_out", "alpha", "beta"):
            if getattr(self, name).shape != ():
                raise EstimatorError(f"{name} must be a scalar")

    @property
    def num_features(self) -> int:
        return self.W_g.shape[1]

    @property
    def proj_dim(self) -> int:
        return self.W_g.shape[0]

    @property
    def pred_dim(self) -> int:
        return self.pred_emb.shape[1]

    @property
    def layers(self) -> int:
        return self.attn.shape[0]

    @property
    def heads(self) -> int:
        return self.attn.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def copy(self) -> "EstimatorParams":
        return EstimatorParams(**{k: v.copy() for k, v in self.blocks().items()})

    def sq_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self.blocks().values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.blocks().values())

    def to_dict(self) -> dict:
        return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.blocks().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorParams":
        return cls(**{k: np.array(d[k]["data"], dtype=np.float64).reshape(d[k]["shape"]) for k in BLOCKS})


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(kg: KnowledgeGraph, num_features: int, config: EstimatorConfig, seed: int) -> EstimatorParams:
    rng = np.random.default_rng(seed)
    fp = config.projection_dim(num_features)
    dp = config.pred_dim
    npred = kg.num_predicates + 1
    return EstimatorParams(
        W_g=_glorot(rng, (fp, num_features), num_features, fp),
        b_g=np.zeros(fp),
        w_out=_glorot(rng, (fp,), fp, 1),
        b_out=np.array(0.0),
        pred_emb=_glorot(rng, (npred, dp), npred, dp),
        attn=_glorot(rng, (config.layers, config.heads, dp + 2), dp + 2, 1),
        alpha=np.array(1.0),
        beta=np.array(0.0),
    )


def check_compatible(params: EstimatorParams, kg: KnowledgeGraph, features) -> None:
    x = features.matrix if isinstance(features, NodeFeatures) else np.asarray(features)
    if x.ndim != 2 or x.shape[1] != params.num_features:
        raise EstimatorError(f"features have dim {x.shape[-1]}, params expect {params.num_features}")
    if x.shape[0] != kg.num_entities:
        raise EstimatorError(f"{x.shape[0]} feature rows for {kg.num_entities} entities")
    if params.pred_emb.shape[0] != kg.num_predicates + 1:
        raise EstimatorError("predicate embedding table does not match the graph")


def project_features(params: EstimatorParams, features) -> np.ndarray:
    x = features.matrix if isinstance(features, NodeFeatures) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.num_features:
        raise EstimatorError(f"features have dim {x.shape[-1]}, params expect {params.num_features}")
    return x @ params.W_g.T + params.b_g


def initial_scores(params: EstimatorParams, projected: np.ndarray) -> np.ndarray:
    return projected @ params.w_out + params.b_out


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def attention_logits(params: EstimatorParams, kg: KnowledgeGraph, h_prev, layer: int, head: int) -> np.ndarray:
    """Pre-activation attention logits for every neighbor-edge entry of the graph."""
    e = kg.edges
    a = params.attn[layer, head]
    pred_term = params.pred_emb @ a[1:-1]
    return a[0] * h_prev[e.node] + pred_term[e.predicate] + a[-1] * h_prev[e.other]


def segment_softmax(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    starts = offsets[:-1]
    counts = np.diff(offsets)
    m = np.maximum.reduceat(values, starts)
    ex = np.exp(values - np.repeat(m, counts))
    return ex / np.repeat(np.add.reduceat(ex, starts), counts)


def edge_attention(params, kg, h_prev, layer, head, slope) -> tuple[np.ndarray, np.ndarray]:
    """(raw logits, normalized weights) over all neighbor-edge entries."""
    raw = attention_logits(params, kg, h_prev, layer, head)
    return raw, segment_softmax(leaky_relu(raw, slope), kg.edges.offsets)


def attention_weights(
    params: EstimatorParams, kg: KnowledgeGraph, h_prev, layer: int, head: int, i: int, leaky_slope: float = 0.01
) -> np.ndarray:
    """Attention of node i over its neighbor-edge entries, in ``kg.edges`` order."""
    e = kg.edges
    lo, hi = e.offsets[i], e.offsets[i + 1]
    a = params.attn[layer, head]
    h_prev = np.asarray(h_prev, dtype=np.float64)
    raw = a[0] * h_prev[i] + params.pred_emb[e.predicate[lo:hi]] @ a[1:-1] + a[-1] * h_prev[e.other[lo:hi]]
    act = leaky_relu(raw, leaky_slope)
    ex = np.exp(act - act.max())
    return ex / ex.sum()


def _aggregate(kg, weights, h_prev):
    e = kg.edges
    return np.add.reduceat(weights * h_prev[e.other], e.offsets[:-1])


def layer_forward(params: EstimatorParams, kg: KnowledgeGraph, h_prev, layer: int, leaky_slope: float = 0.01):
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if not 0 <= layer < params.layers:
        raise EstimatorError(f"layer {layer} out of range")
    out = np.zeros(kg.num_entities)
    for head in range(params.heads):
        _, w = edge_attention(params, kg, h_prev, layer, head, leaky_slope)
        out += _aggregate(kg, w, h_prev)
    return out / params.heads


def log_degree(kg: KnowledgeGraph, epsilon: float) -> np.ndarray:
    return np.log(kg.in_degree + epsilon)


def centrality_adjust(params: EstimatorParams, kg: KnowledgeGraph, h_last, epsilon: float = 1e-8) -> np.ndarray:
    c = elu(params.alpha * log_degree(kg, epsilon) + params.beta)
    return np.maximum(c * np.asarray(h_last), 0.0)


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, kept for backpropagation."""

    projected: np.ndarray
    h: list = field(default_factory=list)  # h[0] .. h[L]
    raw: list = field(default_factory=list)  # raw[l][k] attention logits
    weights: list = field(default_factory=list)  # weights[l][k]
    logdeg: np.ndarray = None
    pre_centrality: np.ndarray = None
    centrality: np.ndarray = None
    pre_relu: np.ndarray = None
    z: np.ndarray = None


def forward_cache(params: EstimatorParams, kg: KnowledgeGraph, features, config: EstimatorConfig) -> ForwardCache:
    check_compatible(params, kg, features)
    xp = project_features(params, features)
    cache = ForwardCache(projected=xp)
    h = initial_scores(params, xp)
    cache.h.append(h)
    for layer in range(params.layers):
        raws, ws = [], []
        nxt = np.zeros_like(h)
        for head in range(params.heads):
            raw, w = edge_attention(params, kg, h, layer, head, config.leaky_slope)
            raws.append(raw)
            ws.append(w)
            nxt += _aggregate(kg, w, h)
        h = nxt / params.heads
        cache.raw.append(raws)
        cache.weights.append(ws)
        cache.h.append(h)
    cache.logdeg = log_degree(kg, config.epsilon)
    cache.pre_centrality = params.alpha * cache.logdeg + params.beta
    cache.centrality = elu(cache.pre_centrality)
    cache.pre_relu = cache.centrality * h
    cache.z = np.maximum(cache.pre_relu, 0.0)
    return cache


def forward(params: EstimatorParams, kg: KnowledgeGraph, features, config: EstimatorConfig = EstimatorConfig()):
    """Importance vector z (length |V|, non-negative)."""
    return forward_cache(params, kg, features, config).z


def save_checkpoint(path, params: EstimatorParams, config: EstimatorConfig, extra: Optional[dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "params": params.to_dict(),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path) -> tuple[EstimatorParams, EstimatorConfig, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise EstimatorError(f"unsupported checkpoint version {payload.get('version')}")
    return (
        EstimatorParams.from_dict(payload["params"]),
        EstimatorConfig(**payload["config"]),
        payload.get("extra", {}),
    )
