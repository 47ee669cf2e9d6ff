"""Flat ``key = value`` run configuration with typed defaults and a stable hash."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Callable, Optional

from .baselines import WalkConfig
from .estimator import EstimatorConfig
from .objective import LossConfig
from .trainer import TrainingConfig


class ConfigFileError(ValueError):
    pass


def _opt(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none", "null") else parse(text)
    return inner


def _str_list(text: str) -> list[str]:
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
    return [t.strip().strip("'\"") for t in text.split(",") if t.strip()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _str_list(text)]


_T, _L, _E, _W = TrainingConfig(), LossConfig(), EstimatorConfig(), WalkConfig()

# key -> (default, parser, help)
SCHEMA: dict[str, tuple[Any, Callable[[str], Any], str]] = {
    "seed": (None, _opt(int), "master seed (required by every command that samples)"),
    "threads": (_T.threads, int, "worker cap for cluster training"),
    "triples": (None, _opt(str), "triples file"),
    "metadata": (None, _opt(str), "metadata sidecar"),
    "features": (None, _opt(str), "features file"),
    "signals_file": (None, _opt(str), "signals file"),
    "out": ("out", str, "output directory"),
    "signals": (None, _opt(_str_list), "train on this subset of signals"),
    "single_signal": (None, _opt(str), "train on exactly one signal"),
    "signal": (None, _opt(str), "signal for ppr/har/forecast"),
    "z": (None, _opt(str), "importance file to evaluate instead of cross-validating"),
    "preprocess.log_skip": ([], _str_list, "signals left un-logged"),
    "estimator.layers": (_E.layers, int, ""),
    "estimator.heads": (_E.heads, int, ""),
    "estimator.pred_dim": (_E.pred_dim, int, ""),
    "estimator.proj_dim": (_E.proj_dim, _opt(int), "default ceil(0.75 F)"),
    "estimator.epsilon": (_E.epsilon, float, ""),
    "estimator.leaky_slope": (_E.leaky_slope, float, ""),
    "loss.lam": (_L.lam, float, ""),
    "loss.nu": (_L.nu, float, ""),
    "loss.edge_sample_fraction": (_L.edge_sample_fraction, float, ""),
    "train.lr": (_T.lr, float, ""),
    "train.max_iterations": (_T.max_iterations, int, ""),
    "train.patience": (_T.patience, int, ""),
    "train.validation_fraction": (_T.validation_fraction, float, ""),
    "train.merge_threshold": (_T.merge_threshold, float, ""),
    "train.min_direct_overlap": (_T.min_direct_overlap, int, ""),
    "train.eval_k": (_T.eval_k, int, ""),
    "train.policy": (_T.policy, str, "size | quality | preference"),
    "train.preferred_signal": (_T.preferred_signal, _opt(str), ""),
    "walk.damping": (_W.damping, float, ""),
    "walk.tolerance": (_W.tolerance, float, ""),
    "walk.max_iterations": (_W.max_iterations, int, ""),
    "har.alpha": (_W.har_alpha, float, ""),
    "har.beta": (_W.har_beta, float, ""),
    "har.gamma": (_W.har_gamma, float, ""),
    "har.iterations": (_W.har_iterations, int, ""),
    "eval.folds": (5, int, ""),
    "eval.ks": ([10, 100], _int_list, ""),
    "eval.closed_world": ([], _str_list, "signals evaluated closed-world"),
    "eval.test_only": ([], _str_list, "signals never trained on"),
    "eval.scope_rule": ("auto", str, "auto | generic | <type>"),
    "eval.raw_gains": (False, _bool, "score against raw rather than log values (with --z)"),
    "predict.target": (None, _opt(str), ""),
    "predict.inputs": ([], _str_list, "feature signals; default all but the target"),
    "predict.z": ([], _str_list, "importance files added as extra columns"),
    "predict.lam": (0.001, float, ""),
    "predict.lr": (0.01, float, ""),
    "predict.iterations": (500, int, ""),
    "forecast.cutoff": (None, _opt(str), "ISO date"),
    "synth.num_nodes": (2000, int, ""),
    "synth.num_predicates": (5, int, ""),
    "synth.edges_per_node": (3, int, ""),
    "synth.num_types": (1, int, ""),
    "synth.latent_mu": (0.0, float, ""),
    "synth.latent_sigma": (1.0, float, ""),
    "synth.num_signals": (3, int, ""),
    "synth.signal_noise": (0.1, float, ""),
    "synth.signal_fraction": (0.2, float, ""),
    "synth.num_rebels": (0, int, ""),
    "synth.feature_noise": (1.0, float, ""),
    "synth.num_features": (16, int, ""),
    "gradcheck.instances": (1, int, "random initializations to check"),
    "gradcheck.step": (1e-5, float, ""),
    "gradcheck.tolerance": (1e-4, float, ""),
    "gradcheck.max_entries": (1000, int, ""),
}


def defaults() -> dict[str, Any]:
    return {k: (list(v[0]) if isinstance(v[0], list) else v[0]) for k, v in SCHEMA.items()}


def parse_value(key: str, text: str) -> Any:
    if key not in SCHEMA:
        raise ConfigFileError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key][1](text)
    except ValueError as exc:
        raise ConfigFileError(f"bad value for {key}: {exc}") from None


def read_config_file(path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        try:
            out[key.strip()] = parse_value(key.strip(), value.strip())
        except ConfigFileError as exc:
            raise ConfigFileError(f"{path}:{lineno}: {exc}") from None
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def echo(cfg: dict) -> dict:
    return {"config": cfg, "config_sha256": config_hash(cfg)}


def estimator_config(cfg: dict) -> EstimatorConfig:
    return EstimatorConfig(cfg["estimator.layers"], cfg["estimator.heads"], cfg["estimator.pred_dim"],
                           cfg["estimator.proj_dim"], cfg["estimator.epsilon"], cfg["estimator.leaky_slope"])


def loss_config(cfg: dict, seed: Optional[int] = None) -> LossConfig:
    return LossConfig(cfg["loss.lam"], cfg["loss.nu"], cfg["loss.edge_sample_fraction"],
                      cfg["seed"] if seed is None else seed)


def training_config(cfg: dict) -> TrainingConfig:
    return TrainingConfig(
        lr=cfg["train.lr"],
        max_iterations=cfg["train.max_iterations"],
        patience=cfg["train.patience"],
        validation_fraction=cfg["train.validation_fraction"],
        merge_threshold=cfg["train.merge_threshold"],
        min_direct_overlap=cfg["train.min_direct_overlap"],
        eval_k=cfg["train.eval_k"],
        policy=cfg["train.policy"],
        preferred_signal=cfg["train.preferred_signal"],
        seed=cfg["seed"],
        threads=cfg["threads"],
        loss=loss_config(cfg),
        estimator=estimator_config(cfg),
    )


def walk_config(cfg: dict) -> WalkConfig:
    return WalkConfig(cfg["walk.damping"], cfg["walk.tolerance"], cfg["walk.max_iterations"],
                      cfg["har.alpha"], cfg["har.beta"], cfg["har.gamma"], cfg["har.iterations"])

