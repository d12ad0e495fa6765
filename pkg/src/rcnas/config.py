"""Run configuration: one YAML or JSON file, sections merged over documented defaults."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import yaml

from .arch import parse_descriptor
from .attacks import AttackSpec
from .rl import RLConfig, Workbench
from .tasks import TEACHER_BUDGETS
from .theory import SparseCodingConfig, ToyNetConfig
from .training import ATConfig

SECTIONS = ("seed", "datasets", "attacks", "teachers", "budgets", "adv_train", "encoder", "policy", "rl",
            "theory", "paths")

DEFAULTS = {
    "seed": 0,
    "datasets": ["cifar10", "cifar100"],
    "attacks": ["fgsm", "pgd20", "cw40"],
    "teachers": ["WRN-28-10", "WRN-34-12", "WRN-46-14", "WRN-70-16"],
    # absolute FLOPs, or "<p>%" of the teacher's FLOPs on the first dataset; null = registered default
    "budgets": None,
    "adv_train": {
        "epochs": 5,
        "batch_size": 128,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "trades_beta": 6.0,
        "inner_steps": 10,
        "augment": False,
        "robust_block": "preact-silu",
    },
    "encoder": {
        "eval_size": 256,
        "hidden": 32,
        "d_state": 64,
        "mlp_hidden": 128,
        "lips_mode": "full",
        "steps": 1000,
        "lr": 1e-3,
    },
    "policy": {"hidden": 64},
    "rl": {
        "meta_iterations": 100,
        "steps_per_iteration": 5,
        "finetune_iterations": 10,
        "policy_lr": 1e-3,
        "reward_epochs": 5,
        "c_definition": "removed",
        "cost_currency": "flops",
        "pg_form": "reinforce",
        "optimizer": "adam",
    },
    "theory": {
        "D": 64,
        "k": 3,
        "sigma_x": 0.05,
        "n": 1000,
        "width": 128,
        "bias": 0.05,
        "sigma_p": 0.01,
        "init_scale": 0.01,
        "lr": 0.5,
        "attack_steps": 5,
        "T": 200,
        "T_prime": 200,
        "tau": 0.5,
        "compression": 0.5,
        "seeds": 11,
    },
    "paths": {"data_dir": None, "cache_dir": None},
}

DOCS = {
    "seed": "global seed for data splits, RL sampling and policy initialisation",
    "datasets": "dataset ids: cifar10, cifar100, cifar10-subset:<n>, synthetic-gauss:<classes>:<n>[:<res>]",
    "attacks": "attack ids: clean, fgsm, pgd<steps>, cw<steps>, external:<name>",
    "teachers": "WRN-<d>-<k>, WRN-<d>-<k>/<width divisor> for a narrowed analog, or a descriptor JSON path",
    "budgets": "one FLOPs budget per teacher (number, or '<p>%' of that teacher's FLOPs); null = registered",
    "adv_train": "TRADES settings shared by teacher and candidate training (inner PGD on KL)",
    "encoder": "state encoder size and autoencoder pre-training schedule",
    "policy": "policy network width",
    "rl": "meta-training / fine-tuning loop settings",
    "theory": "sparse-coding sandbox settings",
    "paths": "data root and trained-model cache directory",
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and v is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Parse a YAML or JSON file (JSON is a subset of YAML, so one parser serves both)."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def schema_text() -> str:
    lines = ["# rcnas configuration (YAML or JSON); every key is optional", ""]
    for section in SECTIONS:
        lines.append(f"# {DOCS[section]}")
        lines.append(yaml.safe_dump({section: DEFAULTS[section]}, sort_keys=False, default_flow_style=False).rstrip())
        lines.append("")
    return "\n".join(lines)


def at_config(cfg: dict, epochs: int | None = None) -> ATConfig:
    a = cfg["adv_train"]
    inner = AttackSpec(kind="pgd", steps=a["inner_steps"], loss="kl")
    return ATConfig(epochs=a["epochs"] if epochs is None else epochs, batch_size=a["batch_size"],
                    learning_rate=a["learning_rate"], momentum=a["momentum"],
                    weight_decay=a["weight_decay"], trades_beta=a["trades_beta"], inner_attack=inner,
                    seed=cfg["seed"], augment=a["augment"])


def rl_config(cfg: dict) -> RLConfig:
    return RLConfig(seed=cfg["seed"], **cfg["rl"])


def _budgets(cfg: dict, teachers, bench: Workbench) -> list[float]:
    names = cfg["teachers"]
    if cfg["budgets"] is None:
        try:
            return [TEACHER_BUDGETS[n] for n in names]
        except KeyError as exc:
            raise ConfigError(f"no registered budget for teacher {exc.args[0]!r}; set budgets") from None
    if len(cfg["budgets"]) != len(teachers):
        raise ConfigError("budgets must list one entry per teacher")
    out = []
    for b, t in zip(cfg["budgets"], teachers):
        if isinstance(b, str) and b.endswith("%"):
            out.append(float(b[:-1]) / 100 * bench.cost(t, cfg["datasets"][0]).flops)
        else:
            out.append(float(b))
    return out


def build_workbench(cfg: dict) -> Workbench:
    try:
        teachers = [parse_descriptor(n) for n in cfg["teachers"]]
        for a in cfg["attacks"]:
            AttackSpec.from_id(a)
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    teacher_at = at_config(cfg)
    reward_at = at_config(cfg, epochs=cfg["rl"]["reward_epochs"])
    bench = Workbench(cfg["datasets"], cfg["attacks"], teachers, [1.0] * len(teachers), teacher_at, reward_at,
                      eval_size=cfg["encoder"]["eval_size"], data_dir=cfg["paths"]["data_dir"],
                      cache_dir=cfg["paths"]["cache_dir"], robust_block=cfg["adv_train"]["robust_block"],
                      split_seed=cfg["seed"])
    bench.budgets = _budgets(cfg, teachers, bench)
    return bench


def theory_configs(cfg: dict):
    t = cfg["theory"]
    sc = SparseCodingConfig(D=t["D"], k=t["k"], sigma_x=t["sigma_x"], n=t["n"], seed=cfg["seed"])
    net = ToyNetConfig(width=t["width"], bias=t["bias"], sigma_p=t["sigma_p"], init_scale=t["init_scale"],
                       lr=t["lr"], attack_steps=t["attack_steps"])
    return sc, net


def snapshot(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True)
