"""Acceptance suite: one recorded PASS/FAIL line per criterion, echoed in the terminal summary."""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from kgimportance.baselines import pagerank, personalized_pagerank
from kgimportance.estimator import EstimatorConfig, forward_cache, init_params
from kgimportance.evalbench import make_folds, ndcg_aligned
from kgimportance.evalbench.experiments import multi_signal_experiment, rebel_experiment
from kgimportance.evalbench.protocol import cross_validate
from kgimportance.evalbench.synth import SynthConfig, synth_generate
from kgimportance.graph import KnowledgeGraph, NodeFeatures
from kgimportance.objective import LossConfig, LossInstance, grad_check_report, listwise_loss
from kgimportance.signals import InputSignal, preprocess_log, top_one_probabilities
from kgimportance.trainer import TrainingConfig, train_single_cluster, validation_split

from conftest import brute_ndcg, random_kg, random_signal, record_criterion
from test_baselines import dense_walk

SEEDS = range(5)


def test_criterion_1_gradients():
    start = time.perf_counter()
    worst, cases = 0.0, 0
    for seed in range(24):
        rng = np.random.default_rng(seed)
        n, f = int(rng.integers(4, 21)), int(rng.integers(2, 9))
        kg = random_kg(rng, n=n, num_predicates=3)
        feats = NodeFeatures(rng.normal(size=(n, f)))
        sigs = [random_signal(rng, f"s{k}", n, max(2, n // 2)) for k in range(2)]
        base = EstimatorConfig(layers=2, heads=2)
        with_kg = seed % 2 == 1
        est = replace(base, pred_dim=base.projection_dim(f)) if with_kg else base
        loss = LossConfig(nu=0.5 if with_kg else 0.0, lam=0.01, seed=seed)
        params = init_params(kg, f, est, seed)
        rep = grad_check_report(params, LossInstance(kg, feats, sigs, loss, est), seed=seed)
        worst = max(worst, rep.max_error)
        cases += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    record_criterion(1, ok, f"max rel error {worst:.2e} over {cases} instances in {elapsed:.1f}s")
    assert ok


def test_criterion_2_normalization():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, f = int(rng.integers(2, 30)), int(rng.integers(1, 8))
        kg = random_kg(rng, n=n, num_predicates=int(rng.integers(1, 4)))
        est = EstimatorConfig(layers=2, heads=int(rng.integers(1, 5)))
        params = init_params(kg, f, est, seed)
        cache = forward_cache(params, kg, NodeFeatures(rng.normal(size=(n, f)) * 5), est)
        starts = kg.edges.offsets[:-1]
        for per_layer in cache.weights:
            for w in per_layer:
                worst = max(worst, float(np.abs(np.add.reduceat(w, starts) - 1).max()))
        p = top_one_probabilities(rng.normal(size=int(rng.integers(1, 50))) * rng.uniform(0.1, 50))
        worst = max(worst, abs(float(p.sum()) - 1))
    ok = worst <= 1e-9
    record_criterion(2, ok, f"max |sum - 1| = {worst:.1e} over 100 instances")
    assert ok


def test_criterion_3_ndcg_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        est = rng.integers(0, 5, size=n).astype(float) if rng.random() < 0.3 else rng.normal(size=n)
        truth = rng.exponential(size=n)
        k = int(rng.integers(1, 70))
        worst = max(worst, abs(ndcg_aligned(est, truth, k) - brute_ndcg(est.tolist(), truth.tolist(), k)))
    hand = ndcg_aligned([1.0, 2.0, 3.0], [3.0, 2.0, 1.0], 3)
    ok = worst <= 1e-12 and abs(hand - 0.78999) < 1e-5
    record_criterion(3, ok, f"max deviation {worst:.1e}; reversed [3,2,1] -> {hand:.5f}")
    assert ok


def test_criterion_4_baselines():
    cyc = 0.0
    for n in (3, 7, 20):
        kg = KnowledgeGraph([f"c{i}" for i in range(n)], ["P"], [[i, 0, (i + 1) % n] for i in range(n)])
        cyc = max(cyc, float(np.abs(pagerank(kg) - 1 / n).max()))
    dense, uniform = 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        kg = random_kg(rng, n=50, num_predicates=3, num_triples=120)
        dense = max(dense, float(np.abs(pagerank(kg) - dense_walk(kg, np.full(50, 0.02))).max()))
        sig = random_signal(rng, "s", 50, 20, preprocessed=False)
        t = np.zeros(50)
        t[sig.ids] = sig.vals / sig.vals.sum()
        dense = max(dense, float(np.abs(personalized_pagerank(kg, sig) - dense_walk(kg, t)).max()))
        flat = InputSignal("u", np.arange(50), np.ones(50))
        uniform = max(uniform, float(np.abs(personalized_pagerank(kg, flat) - pagerank(kg)).max()))
    ok = cyc <= 1e-10 and dense <= 1e-8 and uniform <= 1e-8
    record_criterion(4, ok, f"cycle {cyc:.1e}; dense oracle {dense:.1e}; uniform PPR vs PR {uniform:.1e}")
    assert ok


def test_criterion_5_multi_signal_gain():
    start = time.perf_counter()
    runs = [multi_signal_experiment(SynthConfig(seed=s), TrainingConfig(seed=s)) for s in SEEDS]
    elapsed = time.perf_counter() - start
    multi = float(np.median([r["multi"] for r in runs]))
    single = float(np.median([r["best_single"] for r in runs]))
    ok = multi >= single - 0.01 and elapsed < 600
    record_criterion(5, ok, f"median multi {multi:.4f} vs best single {single:.4f} in {elapsed:.0f}s")
    assert ok


def test_criterion_6_rebel_handling():
    reports = [rebel_experiment(SynthConfig(seed=s, num_rebels=1), TrainingConfig(seed=s)) for s in SEEDS]
    isolated = sum(all(r["rebels_isolated"].values()) for r in reports)
    on = float(np.median([r["median_on"] for r in reports]))
    off = float(np.median([r["median_off"] for r in reports]))
    ok = isolated >= 4 and on >= off - 0.005
    record_criterion(6, ok, f"rebel isolated in {isolated}/5 seeds; median on {on:.4f} vs off {off:.4f}")
    assert ok


def test_criterion_7_training_protocol():
    ds = synth_generate(SynthConfig(seed=0))
    sigs = [preprocess_log(ds.signals[n]) for n in ds.coherent]
    cfg = TrainingConfig(seed=0)
    a = train_single_cluster(ds.kg, ds.features, sigs, cfg)
    b = train_single_cluster(ds.kg, ds.features, sigs, cfg)
    vals = [validation_split(s, cfg.validation_fraction, cfg.seed)[1] for s in sigs]
    from kgimportance.estimator import forward
    from kgimportance.evalbench import ndcg_vector
    z = forward(a.params, ds.kg, ds.features, cfg.estimator)
    replay = float(np.mean([ndcg_vector(z, v, cfg.eval_k) for v in vals]))
    stopped = a.stopped_early and a.iterations < cfg.max_iterations
    ok = stopped and replay == a.best_validation and a.z.tobytes() == b.z.tobytes()
    record_criterion(7, ok, f"stopped at iteration {a.iterations}; replayed {replay!r} vs logged "
                            f"{a.best_validation!r}; identical z {a.z.tobytes() == b.z.tobytes()}")
    assert ok


def test_criterion_8_listwise_bound():
    rng = np.random.default_rng(8)
    gap, eq = math.inf, 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        s = rng.normal(size=n) * rng.uniform(0.1, 5)
        z = rng.normal(size=n) * rng.uniform(0.1, 5)
        p = top_one_probabilities(s)
        entropy = -float(np.sum(p * np.log(p)))
        gap = min(gap, listwise_loss(z, s) - entropy)
        eq = max(eq, abs(listwise_loss(s + rng.normal() * 10, s) - entropy))
    ok = gap >= -1e-9 and eq <= 1e-9
    record_criterion(8, ok, f"min(loss - entropy) {gap:.2e}; max equality gap {eq:.1e}")
    assert ok


def test_criterion_9_cross_validation():
    ds = synth_generate(SynthConfig(num_nodes=400, num_rebels=1, seed=9))
    sigs = [preprocess_log(s) for s in ds.signals]
    size_ok = True
    for s in sigs:
        folds = make_folds(s, 5, 9)
        tests = np.concatenate([te.ids for _, te in folds])
        size_ok &= sorted(tests.tolist()) == sorted(s.ids.tolist())
        size_ok &= all(abs(len(te) - 0.2 * len(s)) <= 1 for _, te in folds)
    report, results = cross_validate(ds.kg, ds.features, sigs, TrainingConfig(max_iterations=60, patience=10),
                                     folds=5, seed=9)
    tags_ok = all(
        r["domain"] == ("ID" if r["signal"] in results[r["fold"]].primary_cluster.members else "OOD")
        for r in report.rows
    )
    ok = size_ok and tags_ok and len(report.rows) == 5 * len(sigs) * 2
    record_criterion(9, ok, f"fold partitions {'ok' if size_ok else 'broken'}; "
                            f"{len(report.rows)} rows tagged {'consistently' if tags_ok else 'inconsistently'}")
    assert ok
