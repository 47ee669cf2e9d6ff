"""MAP training loss, its exact gradient, a finite-difference checker, and Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .estimator import (
    BLOCKS,
    EstimatorConfig,
    EstimatorParams,
    ForwardCache,
    forward_cache,
)
from .graph import KnowledgeGraph
from .signals import InputSignal, top_one_probabilities

LOG_FLOOR = math.log(1e-300)


class ObjectiveError(Exception):
    pass


class ConfigError(ObjectiveError):
    pass


class NumericError(ObjectiveError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.001
    nu: float = 0.0
    edge_sample_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.nu < 0:
            raise ConfigError("lam and nu must be >= 0")
        if not 0 < self.edge_sample_fraction <= 1:
            raise ConfigError("edge_sample_fraction must be in (0, 1]")

    def check_dims(self, params: EstimatorParams) -> None:
        if self.nu > 0 and params.pred_dim != params.proj_dim:
            raise ConfigError(
                f"nu > 0 requires pred_dim == proj_dim (got {params.pred_dim} and {params.proj_dim})"
            )


class GradientBundle(EstimatorParams):
    """Gradient blocks, shaped exactly like EstimatorParams."""

    @classmethod
    def zeros_like(cls, params: EstimatorParams) -> "GradientBundle":
        return cls(**{k: np.zeros_like(v) for k, v in params.blocks().items()})


def listwise_with_grad(z_restricted, s):
    z = np.asarray(z_restricted, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if z.shape != s.shape or z.ndim != 1:
        raise ObjectiveError(f"dimension mismatch: {z.shape} vs {s.shape}")
    if z.size == 0:
        raise ObjectiveError("listwise loss over an empty list")
    p = top_one_probabilities(s)
    shifted = z - z.max()
    logq = shifted - math.log(np.exp(shifted).sum())
    live = logq >= LOG_FLOOR
    loss = -float(p @ np.where(live, logq, LOG_FLOOR))
    q = np.exp(logq)
    grad = q * float(p[live].sum()) - np.where(live, p, 0.0)
    return loss, grad


def listwise_loss(z_restricted, s) -> float:
    """Cross entropy between top-one distributions of a signal and the estimate."""
    return listwise_with_grad(z_restricted, s)[0]


def sample_edges(kg: KnowledgeGraph, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of a random subset of data triples (SELF edges never included)."""
    t = kg.num_triples
    if t == 0:
        return np.zeros(0, dtype=np.int64)
    if fraction >= 1:
        return np.arange(t, dtype=np.int64)
    k = max(1, int(round(fraction * t)))
    return np.sort(rng.choice(t, size=k, replace=False))


def _kg_terms(params, kg, projected, config, sample):
    if config.nu == 0:
        return 0.0, None
    config.check_dims(params)
    if sample is None:
        sample = sample_edges(kg, config.edge_sample_fraction, np.random.default_rng(config.seed))
    tr = kg.triples[sample]
    s, p, o = tr[:, 0], tr[:, 1], tr[:, 2]
    xs, xo, w = projected[s], projected[o], params.pred_emb[p]
    resid = np.sum(xs * w * xo, axis=1) - 1.0
    return 0.5 * config.nu * float(resid @ resid), (s, p, o, xs, xo, w, resid)


def kg_reg_loss(params: EstimatorParams, kg: KnowledgeGraph, projected, config: LossConfig, sample=None) -> float:
    """Diagonal-bilinear triple regularizer over sampled data triples."""
    return _kg_terms(params, kg, np.asarray(projected, dtype=np.float64), config, sample)[0]


@dataclass
class LossTerms:
    listwise: float
    kg: float
    l2: float

    @property
    def total(self) -> float:
        return self.listwise + self.kg + self.l2

    def as_dict(self) -> dict:
        return {"listwise": self.listwise, "kg": self.kg, "l2": self.l2, "total": self.total}


def _evaluate(params, kg, features, signals, config, est_config, sample, want_grad):
    cache = forward_cache(params, kg, features, est_config)
    z = cache.z
    dz = np.zeros_like(z) if want_grad else None
    lw = 0.0
    for sig in signals:
        if len(sig) == 0:
            continue
        val, g = listwise_with_grad(z[sig.ids], sig.vals)
        lw += val
        if want_grad:
            np.add.at(dz, sig.ids, g)
    kg_val, kg_parts = _kg_terms(params, kg, cache.projected, config, sample)
    terms = LossTerms(lw, kg_val, 0.5 * config.lam * params.sq_norm())
    return terms, cache, dz, kg_parts


def loss_terms(params, kg, features, signals: Sequence[InputSignal], config: LossConfig,
               est_config: EstimatorConfig = EstimatorConfig(), sample=None) -> LossTerms:
    return _evaluate(params, kg, features, signals, config, est_config, sample, False)[0]


def total_loss(params, kg, features, signals: Sequence[InputSignal], config: LossConfig,
               est_config: EstimatorConfig = EstimatorConfig(), sample=None) -> float:
    """Listwise terms of every signal + KG regularizer + (lam/2)||theta||^2."""
    return loss_terms(params, kg, features, signals, config, est_config, sample).total


def _backward(params: EstimatorParams, kg: KnowledgeGraph, x, cache: ForwardCache, dz, kg_parts,
              config: LossConfig, est_config: EstimatorConfig) -> GradientBundle:
    g = GradientBundle.zeros_like(params)
    e = kg.edges
    n = kg.num_entities
    npred = params.pred_emb.shape[0]
    starts, counts = e.offsets[:-1], np.diff(e.offsets)
    slope = est_config.leaky_slope

    h_last = cache.h[-1]
    dy = dz * (cache.pre_relu > 0)
    dc = dy * h_last
    dh = dy * cache.centrality
    u = cache.pre_centrality
    du = dc * np.where(u > 0, 1.0, np.exp(np.minimum(u, 0.0)))
    g.alpha[...] = du @ cache.logdeg
    g.beta[...] = du.sum()

    heads = params.heads
    for layer in reversed(range(params.layers)):
        h_prev = cache.h[layer]
        hp_src = h_prev[e.other]
        hp_dst = h_prev[e.node]
        dh_prev = np.zeros(n)
        dagg = dh / heads
        dagg_e = dagg[e.node]
        for head in range(heads):
            w = cache.weights[layer][head]
            raw = cache.raw[layer][head]
            a = params.attn[layer, head]
            dw = dagg_e * hp_src
            dh_prev += np.bincount(e.other, weights=dagg_e * w, minlength=n)
            seg = np.add.reduceat(w * dw, starts)
            dl = w * (dw - np.repeat(seg, counts))
            dr = dl * np.where(raw > 0, 1.0, slope)
            dpred = np.bincount(e.predicate, weights=dr, minlength=npred)
            g.attn[layer, head, 0] = dr @ hp_dst
            g.attn[layer, head, -1] = dr @ hp_src
            g.attn[layer, head, 1:-1] = params.pred_emb.T @ dpred
            g.pred_emb += np.outer(dpred, a[1:-1])
            dh_prev += np.bincount(e.node, weights=dr * a[0], minlength=n)
            dh_prev += np.bincount(e.other, weights=dr * a[-1], minlength=n)
        dh = dh_prev

    g.w_out[...] = cache.projected.T @ dh
    g.b_out[...] = dh.sum()
    dxp = np.outer(dh, params.w_out)
    if kg_parts is not None:
        s, p, o, xs, xo, w, resid = kg_parts
        coef = (config.nu * resid)[:, None]
        np.add.at(dxp, s, coef * w * xo)
        np.add.at(dxp, o, coef * w * xs)
        np.add.at(g.pred_emb, p, coef * xs * xo)
    g.W_g[...] = dxp.T @ x
    g.b_g[...] = dxp.sum(axis=0)

    if config.lam:
        for name in BLOCKS:
            getattr(g, name)[...] += config.lam * getattr(params, name)
    for name in BLOCKS:
        if not np.all(np.isfinite(getattr(g, name))):
            raise NumericError(f"non-finite gradient in block {name!r}")
    return g


def value_and_gradients(params, kg, features, signals: Sequence[InputSignal], config: LossConfig,
                        est_config: EstimatorConfig = EstimatorConfig(), sample=None):
    """Loss terms, exact gradient, and the forward cache (whose ``z`` is the current estimate)."""
    config.check_dims(params)
    if config.nu > 0 and sample is None:
        sample = sample_edges(kg, config.edge_sample_fraction, np.random.default_rng(config.seed))
    terms, cache, dz, kg_parts = _evaluate(params, kg, features, signals, config, est_config, sample, True)
    if not math.isfinite(terms.total):
        raise NumericError("non-finite loss")
    x = getattr(features, "matrix", features)
    grads = _backward(params, kg, np.asarray(x, dtype=np.float64), cache, dz, kg_parts, config, est_config)
    return terms, grads, cache


def gradients(params, kg, features, signals: Sequence[InputSignal], config: LossConfig,
              est_config: EstimatorConfig = EstimatorConfig(), sample=None) -> GradientBundle:
    return value_and_gradients(params, kg, features, signals, config, est_config, sample)[1]


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: EstimatorParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.blocks().items()},
            {k: np.zeros_like(p) for k, p in params.blocks().items()},
            0,
        )


def adam_step(state: AdamState, params: EstimatorParams, grads: EstimatorParams, lr: float = 0.005,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place; returns ``(state, params)``.

    ``params``/``grads`` are EstimatorParams-like objects or dicts of arrays.
    """
    blocks = params.blocks() if hasattr(params, "blocks") else params
    gblocks = grads.blocks() if hasattr(grads, "blocks") else grads
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in blocks.items()}
        state.v = {k: np.zeros_like(p) for k, p in blocks.items()}
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in blocks.items():
        gr = gblocks[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * gr
        v *= beta2
        v += (1.0 - beta2) * gr * gr
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state, params


@dataclass
class LossInstance:
    """Everything the loss depends on besides the parameters."""

    kg: KnowledgeGraph
    features: object
    signals: Sequence[InputSignal]
    config: LossConfig = LossConfig()
    est_config: EstimatorConfig = EstimatorConfig()
    sample: Optional[np.ndarray] = None

    def fixed_sample(self) -> Optional[np.ndarray]:
        if self.config.nu > 0 and self.sample is None:
            return sample_edges(self.kg, self.config.edge_sample_fraction, np.random.default_rng(self.config.seed))
        return self.sample


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    skipped: int
    worst_block: Optional[str] = None
    worst_index: Optional[tuple] = None


def _kink_signature(cache: ForwardCache, instance: LossInstance):
    parts = [r > 0 for raws in cache.raw for r in raws]
    parts.append(cache.pre_relu > 0)
    z = cache.z
    for sig in instance.signals:
        if len(sig):
            zr = z[sig.ids]
            shifted = zr - zr.max()
            parts.append(shifted - math.log(np.exp(shifted).sum()) >= LOG_FLOOR)
    return np.concatenate([p.ravel() for p in parts])


def grad_check_report(params: EstimatorParams, instance: LossInstance, step: float = 1e-5,
                      max_entries: int = 1000, seed: int = 0) -> GradCheckReport:
    if step <= 0:
        raise ValueError("step must be > 0")
    sample = instance.fixed_sample()
    args = (instance.kg, instance.features, instance.signals, instance.config, instance.est_config, sample)
    _, grads, cache = value_and_gradients(params, *args)
    base_sig = _kink_signature(cache, instance)

    entries = [(name, idx) for name in BLOCKS for idx in np.ndindex(getattr(params, name).shape)]
    if len(entries) > max_entries:
        pick = np.sort(np.random.default_rng(seed).choice(len(entries), size=max_entries, replace=False))
        entries = [entries[k] for k in pick]

    work = params.copy()
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for name, idx in entries:
        block = getattr(work, name)
        orig = float(block[idx])
        block[idx] = orig + step
        plus, plus_cache, _, _ = _evaluate(work, *args, False)
        block[idx] = orig - step
        minus, minus_cache, _, _ = _evaluate(work, *args, False)
        block[idx] = orig
        if not (np.array_equal(_kink_signature(plus_cache, instance), base_sig)
                and np.array_equal(_kink_signature(minus_cache, instance), base_sig)):
            skipped += 1
            continue
        num = (plus.total - minus.total) / (2 * step)
        ana = float(getattr(grads, name)[idx])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        checked += 1
        if err > worst:
            worst, worst_at = err, (name, idx)
    return GradCheckReport(worst, checked, skipped, *(worst_at or (None, None)))


def grad_check(params: EstimatorParams, instance: LossInstance, step: float = 1e-5,
               max_entries: int = 1000, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_report(params, instance, step, max_entries, seed).max_error
