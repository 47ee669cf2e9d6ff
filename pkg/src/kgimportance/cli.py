"""``kgimportance`` command line: validate, train, eval, baseline, predict, forecast, synth, gradcheck.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as C
from .baselines import BaselineError, har, pagerank, personalized_pagerank
from .estimator import init_params, save_checkpoint
from .evalbench.metrics import EvaluationError
from .evalbench.protocol import EvaluationReport, cross_validate, evaluate
from .evalbench.synth import SynthConfig, default_signals, synth_generate, write_dataset
from .evalbench.tasks import forecasting_split, signal_prediction_task
from .graph import GraphError, KnowledgeGraph, load_features, load_triples, validate
from .objective import LossInstance, ObjectiveError, grad_check_report
from .signals import SignalError, SignalSet, UnknownSignalError, load_signals, preprocess_all
from .trainer import TrainingError, run_clustering

log = logging.getLogger("kgimportance")

COMMANDS = ("validate", "train", "eval", "baseline", "predict", "forecast", "synth", "gradcheck")
SEEDLESS = ("validate", "baseline")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgimportance", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "baseline":
            p.add_argument("method", choices=("pr", "ppr", "har"))
        p.add_argument("--config", help="flat key = value config file")
        for key, (_, _, hlp) in C.SCHEMA.items():
            flags = [f"--{key}"]
            if "_" in key:
                flags.append("--" + key.replace("_", "-"))
            p.add_argument(*flags, dest=key, default=argparse.SUPPRESS, metavar="VALUE", help=hlp or None)
    return parser


def effective_config(args: argparse.Namespace) -> dict:
    cfg = C.defaults()
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg.update(C.read_config_file(args.config))
    for key in C.SCHEMA:
        if key in vars(args):
            cfg[key] = C.parse_value(key, getattr(args, key))
    if args.command not in SEEDLESS and cfg["seed"] is None:
        raise UsageError("seed is required (set seed = N in the config or pass --seed N)")
    return cfg


# ---------------------------------------------------------------- io helpers

def _require(cfg: dict, key: str) -> str:
    path = cfg[key]
    if path is None:
        raise UsageError(f"missing required option --{key}")
    if not Path(path).is_file():
        raise UsageError(f"{key}: file not found: {path}")
    return path


def _optional(cfg: dict, key: str) -> Optional[str]:
    return _require(cfg, key) if cfg[key] is not None else None


def _load_graph(cfg: dict) -> KnowledgeGraph:
    return load_triples(_require(cfg, "triples"), _optional(cfg, "metadata"))


def _load_all(cfg: dict, need_signals: bool = True):
    kg = _load_graph(cfg)
    features = load_features(_require(cfg, "features"), kg)
    raw = load_signals(_require(cfg, "signals_file"), kg) if need_signals or cfg["signals_file"] else None
    return kg, features, raw


def _out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    return str(obj)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def write_scores(kg: KnowledgeGraph, z: np.ndarray, path: Path) -> None:
    path.write_text("".join(f"{n}\t{v!r}\n" for n, v in zip(kg.entity_names, np.asarray(z).tolist())),
                    encoding="utf-8")


def read_scores(kg: KnowledgeGraph, path) -> np.ndarray:
    index = {n: i for i, n in enumerate(kg.entity_names)}
    z = np.full(kg.num_entities, np.nan)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[0] not in index:
            raise GraphError(f"{path}:{lineno}: expected a known entity and a score")
        z[index[parts[0]]] = float(parts[1])
    if np.isnan(z).any():
        raise GraphError(f"{path}: {int(np.isnan(z).sum())} entities have no score")
    return z


def _pick(signals: SignalSet, names: Sequence[str]) -> list:
    return [signals[n] for n in names]


# ---------------------------------------------------------------- commands

def cmd_validate(cfg: dict) -> int:
    kg, features, raw = _load_all(cfg, need_signals=False)
    report = validate(kg, features, raw)
    report.update(C.echo(cfg))
    _write_json(_out(cfg) / "validation.json", report)
    for v in report["violations"]:
        print(f"violation: {v['kind']}: {v['detail']}")
    print(f"{len(report['violations'])} violation(s)")
    return 1 if report["violations"] else 0


def _train_inputs(cfg: dict, signals: SignalSet) -> list:
    if cfg["single_signal"] is not None and cfg["signals"] is not None:
        raise UsageError("--signals and --single-signal are mutually exclusive")
    if cfg["single_signal"] is not None:
        return [signals[cfg["single_signal"]]]
    if cfg["signals"] is not None:
        return _pick(signals, cfg["signals"])
    return list(signals)


def cmd_train(cfg: dict) -> int:
    kg, features, raw = _load_all(cfg)
    signals = preprocess_all(raw, cfg["preprocess.log_skip"])
    train = _train_inputs(cfg, signals)
    tcfg = C.training_config(cfg)
    result = run_clustering(kg, features, train, tcfg)

    out = _out(cfg)
    write_scores(kg, result.z, out / "z.tsv")
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    lines = []
    for k, cluster in enumerate(result.clusters):
        save_checkpoint(ckpt / f"cluster{k}.json", cluster.params, tcfg.estimator,
                        {"members": list(cluster.members), "quality": cluster.quality})
        lines.extend(json.dumps(dict(entry, cluster=k), sort_keys=True, default=_json_default)
                     for entry in cluster.log)
    (out / "train_log.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    _write_json(out / "clustering.json", dict(result.to_dict(), **C.echo(cfg)))
    print(f"primary cluster: {', '.join(result.primary_cluster.members)}")
    return 0


def cmd_eval(cfg: dict) -> int:
    kg, features, raw = _load_all(cfg)
    signals = preprocess_all(raw, cfg["preprocess.log_skip"])
    ks = cfg["eval.ks"]
    closed = set(cfg["eval.closed_world"])
    meta = C.echo(cfg)
    if cfg["z"] is not None:
        z = read_scores(kg, _require(cfg, "z"))
        report = EvaluationReport(metadata=meta)
        for s in (raw if cfg["eval.raw_gains"] else signals):
            report.extend(evaluate(z, s, kg, cfg["eval.scope_rule"], s.name in closed, ks))
    else:
        report, _ = cross_validate(kg, features, list(signals), C.training_config(cfg), cfg["eval.folds"], ks,
                                   closed, cfg["eval.test_only"], cfg["seed"], meta)
    out = _out(cfg)
    (out / "eval.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
    for row in report.summary():
        print(f"{row['signal']}\t{row['domain']}\tndcg@{row['k']}\t{row['mean']:.4f}")
    return 0


def cmd_baseline(cfg: dict, method: str) -> int:
    kg = _load_graph(cfg)
    walk = C.walk_config(cfg)
    if method == "pr":
        z = pagerank(kg, walk)
    else:
        if cfg["signal"] is None:
            raise UsageError(f"baseline {method} needs --signal NAME")
        raw = load_signals(_require(cfg, "signals_file"), kg)
        sig = preprocess_all(raw, cfg["preprocess.log_skip"])[cfg["signal"]]
        z = (personalized_pagerank if method == "ppr" else har)(kg, sig, walk)
    out = _out(cfg)
    write_scores(kg, z, out / f"baseline_{method}.tsv")
    _write_json(out / f"baseline_{method}.json", dict(method=method, **C.echo(cfg)))
    return 0


def cmd_predict(cfg: dict) -> int:
    kg, features, raw = _load_all(cfg)
    signals = preprocess_all(raw, cfg["preprocess.log_skip"])
    target = cfg["predict.target"]
    if target is None:
        raise UsageError("predict needs --predict.target NAME")
    target_sig = signals[target]
    inputs = cfg["predict.inputs"] or [n for n in signals.names if n != target]
    if target in inputs:
        raise UsageError("the target cannot also be an input")
    feats = _pick(signals, inputs)
    z_vectors = {Path(p).stem: read_scores(kg, p) for p in cfg["predict.z"]}
    if not z_vectors:
        z_vectors["importance"] = run_clustering(kg, features, feats, C.training_config(cfg)).z
    res = signal_prediction_task(target_sig, feats, z_vectors, cfg["seed"], cfg["eval.folds"], cfg["eval.ks"],
                                 cfg["predict.lam"], cfg["predict.lr"], cfg["predict.iterations"])
    _write_json(_out(cfg) / "predict.json", dict(target=target, inputs=inputs, results=res, **C.echo(cfg)))
    for name, by_k in res.items():
        print(name, " ".join(f"{k}={v['mean']:.4f}" for k, v in by_k.items()))
    return 0


def cmd_forecast(cfg: dict) -> int:
    kg, features, raw = _load_all(cfg)
    signals = preprocess_all(raw, cfg["preprocess.log_skip"])
    if cfg["signal"] is None or cfg["forecast.cutoff"] is None:
        raise UsageError("forecast needs --signal NAME and --forecast.cutoff DATE")
    before, after = forecasting_split(kg, signals[cfg["signal"]], cfg["forecast.cutoff"])
    result = run_clustering(kg, features, [before], C.training_config(cfg))
    rows = evaluate(result.z, after, kg, cfg["eval.scope_rule"], False, cfg["eval.ks"], [before.name])
    out = _out(cfg)
    write_scores(kg, result.z, out / "z.tsv")
    _write_json(out / "forecast.json", dict(train_size=len(before), test_size=len(after), rows=rows, **C.echo(cfg)))
    for r in rows:
        print(f"ndcg@{r['k']}\t{r['ndcg']:.4f}")
    return 0


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        num_nodes=cfg["synth.num_nodes"],
        num_predicates=cfg["synth.num_predicates"],
        edges_per_node=cfg["synth.edges_per_node"],
        num_types=cfg["synth.num_types"],
        latent_mu=cfg["synth.latent_mu"],
        latent_sigma=cfg["synth.latent_sigma"],
        signals=default_signals(cfg["synth.num_signals"], cfg["synth.signal_noise"], cfg["synth.signal_fraction"]),
        num_rebels=cfg["synth.num_rebels"],
        feature_noise=cfg["synth.feature_noise"],
        num_features=cfg["synth.num_features"],
        seed=cfg["seed"],
    )


def cmd_synth(cfg: dict) -> int:
    try:
        scfg = synth_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out(cfg)
    manifest = write_dataset(synth_generate(scfg), out, scfg)
    manifest.update(C.echo(cfg))
    _write_json(out / "manifest.json", manifest)
    for name, digest in sorted(manifest["files"].items()):
        print(f"{digest}  {name}")
    return 0


def fixture_path(name: str) -> str:
    return str(resources.files("kgimportance") / "fixtures" / name)


def cmd_gradcheck(cfg: dict) -> int:
    if cfg["triples"] is None:
        cfg = dict(cfg, triples=fixture_path("tiny_triples.tsv"), metadata=fixture_path("tiny_metadata.tsv"),
                   features=fixture_path("tiny_features.tsv"), signals_file=fixture_path("tiny_signals.tsv"))
    kg, features, raw = _load_all(cfg)
    signals = list(preprocess_all(raw, cfg["preprocess.log_skip"]))
    est = C.estimator_config(cfg)
    instance = LossInstance(kg, features, signals, C.loss_config(cfg), est)
    checks = []
    for k in range(cfg["gradcheck.instances"]):
        params = init_params(kg, features.dim, est, cfg["seed"] + k)
        instance.config.check_dims(params)
        rep = grad_check_report(params, instance, cfg["gradcheck.step"], cfg["gradcheck.max_entries"], cfg["seed"])
        checks.append({"instance": k, "max_rel_error": rep.max_error, "checked": rep.checked,
                       "skipped": rep.skipped, "worst_block": rep.worst_block, "worst_index": rep.worst_index})
    worst = max(c["max_rel_error"] for c in checks)
    ok = worst < cfg["gradcheck.tolerance"]
    _write_json(_out(cfg) / "gradcheck.json", dict(checks=checks, max_rel_error=worst, passed=ok, **C.echo(cfg)))
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'})")
    return 0 if ok else 1


# ---------------------------------------------------------------- entry point

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = effective_config(args)
        if args.command == "baseline":
            return cmd_baseline(cfg, args.method)
        return globals()[f"cmd_{args.command}"](cfg)
    except (UsageError, C.ConfigFileError, UnknownSignalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GraphError, SignalError, TrainingError, ObjectiveError, EvaluationError, BaselineError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
