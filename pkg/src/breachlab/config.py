"""Run configuration: a schema-versioned JSON document with strict keys.

Every section has defaults; unknown keys anywhere are rejected. Seeds may
be left null, in which case they are derived deterministically from
master_seed, and the resolved values are echoed into every report for
provenance. Command-line overrides use dotted paths ("train.epochs=30",
"attack.kind=cw"); values parse as JSON with a fallback to plain strings.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackBudget
from .experiment import BreachScenario
from .nnet import TrainConfig
from .seeding import child_seed

SCHEMA_VERSION = 1

# tags for master-seed derivation, one per seed slot
_SEED_TASK = 1
_SEED_TRAIN = 2
_SEED_ATTACK = 3
_SEED_THEORY = 4
_SEED_GATEWAY = 5


class ConfigError(ValueError):
    """Invalid configuration document or override."""


def default_config_dict() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "master_seed": 0,
        "task": {
            "kind": "synthetic_glyphs",
            "params": None,
            "seed": None,
        },
        "train": {
            "learning_rate": 0.1,
            "epochs": 20,
            "batch_size": 32,
            "seed": None,
            "hidden_weight": 1.0,
            "snnl_weight": 0.5,
            "hidden_dims": [64, 64],
        },
        "hidden": {
            "spread": 0.3,
            "samples_per_label": 100,
            "latent_dim": 16,
        },
        "attack": {
            "kind": "pgd",
            "epsilon": 0.3,
            "step_size": 0.03,
            "steps": 100,
            "cw_steps": 200,
            "search_rounds": 6,
            "c_lo": 1e-3,
            "c_hi": 1e2,
            "beta": 0.01,
            "box": [0.0, 1.0],
            "p_drop": 0.1,
            "target_prob": 0.95,
            "prune_ratio": 0.2,
            "data_fraction": 0.1,
            "seed": None,
        },
        "scenario": {
            "horizon": 12,
            "target_fpr": 0.05,
            "nbr_cutoff": 0.20,
            "n_attack_inputs": 100,
            "trials": 3,
        },
        "finetune": {
            "learning_rate": 0.05,
            "epochs": 10,
            "batch_size": 32,
            "seed": 0,
            "hidden_weight": 0.0,
            "snnl_weight": 0.0,
            "hidden_dims": [64, 64],
        },
        "theory": {
            "gammas": [0.5, 1.0, 2.0],
            "ratio": 25.0,
            "p": 0.95,
            "n_samples": 1_000_000,
            "seed": None,
        },
        "gateway": {
            "host": "127.0.0.1",
            "port": 7707,
            "target_fpr": 0.05,
            "seed": None,
        },
        "paths": {
            "store": "store",
            "out": "out",
        },
    }


def _merge_strict(base: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = _merge_strict(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[keys[-1]] = value
    return doc


@dataclass
class RunConfig:
    doc: dict = field(default_factory=default_config_dict)

    @property
    def master_seed(self) -> int:
        return int(self.doc["master_seed"])

    def resolved(self) -> dict:
        """The document with every null seed replaced by its derived value."""
        doc = copy.deepcopy(self.doc)
        for section, tag in (
            ("task", _SEED_TASK),
            ("train", _SEED_TRAIN),
            ("attack", _SEED_ATTACK),
            ("theory", _SEED_THEORY),
            ("gateway", _SEED_GATEWAY),
        ):
            if doc[section].get("seed") is None:
                doc[section]["seed"] = child_seed(self.master_seed, tag)
        return doc

    # -- typed section builders

    def train_config(self) -> TrainConfig:
        sec = self.resolved()["train"]
        return TrainConfig(
            learning_rate=float(sec["learning_rate"]),
            epochs=int(sec["epochs"]),
            batch_size=int(sec["batch_size"]),
            seed=int(sec["seed"]),
            hidden_weight=float(sec["hidden_weight"]),
            snnl_weight=float(sec["snnl_weight"]),
            hidden_dims=tuple(int(v) for v in sec["hidden_dims"]),
        )

    def finetune_config(self) -> TrainConfig:
        sec = self.resolved()["finetune"]
        return TrainConfig(
            learning_rate=float(sec["learning_rate"]),
            epochs=int(sec["epochs"]),
            batch_size=int(sec["batch_size"]),
            seed=int(sec["seed"]),
            hidden_weight=float(sec["hidden_weight"]),
            snnl_weight=float(sec["snnl_weight"]),
            hidden_dims=tuple(int(v) for v in sec["hidden_dims"]),
        )

    def budget(self) -> AttackBudget:
        sec = self.resolved()["attack"]
        return AttackBudget(
            epsilon=float(sec["epsilon"]),
            step_size=float(sec["step_size"]),
            steps=int(sec["steps"]),
            cw_steps=int(sec["cw_steps"]),
            search_rounds=int(sec["search_rounds"]),
            c_lo=float(sec["c_lo"]),
            c_hi=float(sec["c_hi"]),
            beta=float(sec["beta"]),
            box=tuple(float(v) for v in sec["box"]),
        )

    def scenario(self) -> BreachScenario:
        doc = self.resolved()
        sc = doc["scenario"]
        at = doc["attack"]
        hidden = doc["hidden"]
        scenario = BreachScenario(
            horizon=int(sc["horizon"]),
            attack_kind=str(at["kind"]),
            budget=self.budget(),
            target_fpr=float(sc["target_fpr"]),
            nbr_cutoff=float(sc["nbr_cutoff"]),
            n_attack_inputs=int(sc["n_attack_inputs"]),
            trials=int(sc["trials"]),
            task_kind=str(doc["task"]["kind"]),
            task_params=doc["task"]["params"],
            task_seed=int(doc["task"]["seed"]),
            train=self.train_config(),
            spread=float(hidden["spread"]),
            samples_per_label=int(hidden["samples_per_label"]),
            latent_dim=int(hidden["latent_dim"]),
            p_drop=float(at["p_drop"]),
            target_prob=float(at["target_prob"]),
            prune_ratio=float(at["prune_ratio"]),
            data_fraction=float(at["data_fraction"]),
            finetune=self.finetune_config(),
        )
        try:
            scenario.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return scenario

    def trial_seeds(self) -> list[int]:
        base = int(self.resolved()["attack"]["seed"])
        return [child_seed(base, t) for t in range(int(self.doc["scenario"]["trials"]))]


def load_config(path: str | Path | None, overrides=()) -> RunConfig:
    doc = default_config_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        if user.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {user.get('schema_version')}, expected {SCHEMA_VERSION}"
            )
        doc = _merge_strict(doc, user)
    doc = apply_overrides(doc, overrides)
    cfg = RunConfig(doc)
    cfg.scenario()  # validate eagerly so config errors surface before any work
    return cfg
