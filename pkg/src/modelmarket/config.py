"""Flat key=value scenario configs with a closed, typed schema.

Files hold one `section.key = value` pair per line; `#` starts a comment.
Unknown keys are errors (typos must not silently become defaults), as are
missing required keys and untypeable values. Lists are comma-separated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .auction import TrainConfig
from .marketsim import ReliabilityGridConfig, RevenueExperimentConfig
from .reputation import AggregationWeights
from .tltask import SyntheticTaskSpec


class ConfigError(Exception):
    """Invalid scenario config; the message names the offending key."""


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(t.strip()) for t in raw.split(",") if t.strip())


def _parse_float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(t.strip()) for t in raw.split(",") if t.strip())


def _parse_str_list(raw: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in raw.split(",") if t.strip())


_PARSERS = {"int": int, "float": float, "str": str, "bool": _parse_bool,
            "int_list": _parse_int_list, "float_list": _parse_float_list,
            "str_list": _parse_str_list}

# key -> (type name, default); REQUIRED means the file must set it
REQUIRED = object()

SCHEMA: dict[str, tuple[str, Any]] = {
    "seed": ("int", 0),
    "market.n_buyers": ("int", REQUIRED),
    "market.n_items": ("int", REQUIRED),
    "market.permitted_reputation": ("float", 0.5),
    "market.rating_threshold": ("float", 0.75),
    "market.window": ("int", 20),
    "market.reputation_prior": ("float", 1.0),
    "market.mechanism": ("str", "SPA"),
    "market.weight_direct": ("float", 0.6),
    "market.weight_recommended": ("float", 0.25),
    "market.weight_referenced": ("float", 0.15),
    "train.epochs": ("int", 80),
    "train.batch_size": ("int", 128),
    "train.batches_per_epoch": ("int", 25),
    "train.learning_rate": ("float", 1e-3),
    "train.misreport_steps": ("int", 25),
    "train.misreport_lr": ("float", 0.1),
    "train.lambda_init": ("float", 5.0),
    "train.rho": ("float", 1.0),
    "train.rho_growth": ("float", 1.2),
    "train.rho_max": ("float", 5000.0),
    "train.multiplier_update_period": ("int", 2),
    "train.hidden": ("int_list", (100, 100)),
    "train.test_samples": ("int", 2048),
    "revenue.n_poisoned": ("int", 1),
    "revenue.poison_strength": ("float", 0.5),
    "revenue.mechanisms": ("str_list", ("DLA", "DLA-LR", "SPA", "SPA-unfiltered")),
    "revenue.regret_eval_samples": ("int", 1024),
    "revenue.regret_eval_steps": ("int", 150),
    "reliability.attack_strengths": ("float_list", (0.0, 0.25, 0.5)),
    "reliability.permitted_reputations": ("float_list", (0.0, 0.5, 0.8)),
    "reliability.seeds": ("int", 20),
    "reliability.rounds": ("int", 20),
    "reliability.n_malicious": ("int", 1),
    "reliability.fine_tune_epochs": ("int", 8),
    "reliability.dump_chains": ("bool", False),
    "task.feature_dim": ("int", 2),
    "task.class_sep": ("float", 2.4),
    "task.noise": ("float", 0.9),
    "task.domain_shift": ("float", 0.8),
    "task.source_samples": ("int", 200),
    "task.target_train_samples": ("int", 8),
    "task.target_test_samples": ("int", 200),
}


@dataclass(frozen=True)
class ResolvedConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]


def parse_config_text(text: str) -> ResolvedConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if key in raw:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})")
        raw[key] = value

    values: dict[str, Any] = {}
    for key, (type_name, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = _PARSERS[type_name](raw[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
        elif default is REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            values[key] = default
    return ResolvedConfig(values)


def load_config(path) -> ResolvedConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


# -- builders ---------------------------------------------------------------

def task_spec(cfg: ResolvedConfig) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(
        feature_dim=cfg["task.feature_dim"],
        class_sep=cfg["task.class_sep"],
        noise=cfg["task.noise"],
        domain_shift=cfg["task.domain_shift"],
        source_samples=cfg["task.source_samples"],
        target_train_samples=cfg["task.target_train_samples"],
        target_test_samples=cfg["task.target_test_samples"])


def train_config(cfg: ResolvedConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        batches_per_epoch=cfg["train.batches_per_epoch"],
        learning_rate=cfg["train.learning_rate"],
        misreport_steps=cfg["train.misreport_steps"],
        misreport_lr=cfg["train.misreport_lr"],
        lambda_init=cfg["train.lambda_init"],
        rho=cfg["train.rho"],
        rho_growth=cfg["train.rho_growth"],
        rho_max=cfg["train.rho_max"],
        multiplier_update_period=cfg["train.multiplier_update_period"],
        hidden=tuple(cfg["train.hidden"]),
        seed=seed,
        test_samples=cfg["train.test_samples"])


def revenue_config(cfg: ResolvedConfig, seed: int) -> RevenueExperimentConfig:
    return RevenueExperimentConfig(
        n_buyers=cfg["market.n_buyers"],
        n_items=cfg["market.n_items"],
        n_poisoned=cfg["revenue.n_poisoned"],
        poison_strength=cfg["revenue.poison_strength"],
        permitted_reputation=cfg["market.permitted_reputation"],
        train=train_config(cfg, seed),
        master_seed=seed,
        mechanisms=tuple(cfg["revenue.mechanisms"]),
        regret_eval_samples=cfg["revenue.regret_eval_samples"],
        regret_eval_steps=cfg["revenue.regret_eval_steps"])


def aggregation_weights(cfg: ResolvedConfig) -> AggregationWeights:
    return AggregationWeights(cfg["market.weight_direct"],
                              cfg["market.weight_recommended"],
                              cfg["market.weight_referenced"])


def reliability_config(cfg: ResolvedConfig, seed: int) -> ReliabilityGridConfig:
    return ReliabilityGridConfig(
        attack_strengths=tuple(cfg["reliability.attack_strengths"]),
        permitted_reputations=tuple(cfg["reliability.permitted_reputations"]),
        seeds=cfg["reliability.seeds"],
        rounds=cfg["reliability.rounds"],
        n_buyers=cfg["market.n_buyers"],
        n_sellers=cfg["market.n_items"],
        n_malicious=cfg["reliability.n_malicious"],
        mechanism=cfg["market.mechanism"],
        rating_threshold=cfg["market.rating_threshold"],
        window=cfg["market.window"],
        weights=aggregation_weights(cfg),
        reputation_prior=cfg["market.reputation_prior"],
        master_seed=seed,
        task=task_spec(cfg),
        fine_tune_epochs=cfg["reliability.fine_tune_epochs"])
