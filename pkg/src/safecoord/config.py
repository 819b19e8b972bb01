"""Experiment configuration: YAML documents with ``extends`` and dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .env import ENV_REGISTRY

VARIANTS = ("co2po", "no-blackboard", "always-write", "no-hazard-loss", "mappo-lag-degenerate")


class ConfigError(ValueError):
    """Invalid or unknown configuration field."""


@dataclass
class EnvSection:
    name: str = "corridor_velocity"
    params: dict = field(default_factory=dict)


@dataclass
class PPOSection:
    gamma: float = 0.96
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    target_kl: float = 0.016
    epochs: int = 10
    minibatches: int = 2
    actor_lr: float = 5e-4
    critic_lr: float = 5e-3
    entropy_coef: float = 0.0
    max_grad_norm: float = 10.0
    optimizer: str = "adam"


@dataclass
class DualSection:
    cost_budget: float = 25.0
    lambda_init: float = 0.1
    lr: float = 5e-4
    lambda_max: float = 100.0


@dataclass
class ModelSection:
    hidden: int = 64
    layers: int = 2
    embed_dim: int = 64
    d_msg: int = 16
    init_scale: float = 1.0
    policy_out_scale: float = 0.01
    log_std_init: float = math.log(0.5)
    share_actor_params: bool = False


@dataclass
class BlackboardSection:
    enabled: bool = True
    always_write: bool = False
    k: int = 3
    adaptive: bool = True
    tau_init: float = 0.10
    target_rate: float = 0.05
    threshold_lr: float = 0.05
    tau_min: float = 0.05
    tau_max: float = 0.95
    ema_beta: float = 0.99


@dataclass
class HazardSection:
    threshold: float = 0.1
    horizon: int = 8
    loss_coef: float = 0.5
    write_penalty: float = 0.001


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    variant: str = "co2po"
    ppo: PPOSection = field(default_factory=PPOSection)
    dual: DualSection = field(default_factory=DualSection)
    model: ModelSection = field(default_factory=ModelSection)
    blackboard: BlackboardSection = field(default_factory=BlackboardSection)
    hazard: HazardSection = field(default_factory=HazardSection)
    total_steps: int = 3_000_000
    n_envs: int = 16
    rollout_length: int = 512
    eval_interval: int = 16_000
    eval_episodes: int = 10
    seed: int = 0
    seeds: int = 1
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        self.validate()

    # -- validation ---------------------------------------------------------
    def validate(self) -> None:
        errs: list[str] = []

        def need(cond: bool, name: str, msg: str) -> None:
            if not cond:
                errs.append(f"{name}: {msg}")

        type_errs = _type_errors(self)
        if type_errs:
            raise ConfigError("; ".join(type_errs))
        need(self.env.name in ENV_REGISTRY, "env.name", f"must be one of {sorted(ENV_REGISTRY)}")
        if self.env.name in ENV_REGISTRY:
            known = {f.name for f in dataclasses.fields(ENV_REGISTRY[self.env.name][1])}
            bad = sorted(set(self.env.params) - known)
            need(not bad, "env.params", f"unknown keys {bad}")
        need(self.variant in VARIANTS, "variant", f"must be one of {list(VARIANTS)}")
        p = self.ppo
        need(0 < p.gamma <= 1, "ppo.gamma", "must lie in (0, 1]")
        need(0 <= p.gae_lambda <= 1, "ppo.gae_lambda", "must lie in [0, 1]")
        need(0 < p.clip_eps < 1, "ppo.clip_eps", "must lie in (0, 1)")
        need(p.target_kl > 0, "ppo.target_kl", "must be positive")
        need(_is_int(p.epochs) and p.epochs >= 1, "ppo.epochs", "must be an integer >= 1")
        need(_is_int(p.minibatches) and p.minibatches >= 1, "ppo.minibatches", "must be an integer >= 1")
        need(p.actor_lr >= 0, "ppo.actor_lr", "must be >= 0")
        need(p.critic_lr >= 0, "ppo.critic_lr", "must be >= 0")
        need(p.entropy_coef >= 0, "ppo.entropy_coef", "must be >= 0")
        need(p.max_grad_norm > 0, "ppo.max_grad_norm", "must be positive")
        need(p.optimizer in ("adam", "sgd"), "ppo.optimizer", "must be 'adam' or 'sgd'")
        d = self.dual
        need(d.cost_budget >= 0, "dual.cost_budget", "must be >= 0")
        need(d.lambda_max > 0, "dual.lambda_max", "must be positive")
        need(0 <= d.lambda_init <= d.lambda_max, "dual.lambda_init", "must lie in [0, lambda_max]")
        need(d.lr >= 0, "dual.lr", "must be >= 0")
        m = self.model
        for name in ("hidden", "layers", "embed_dim", "d_msg"):
            v = getattr(m, name)
            need(_is_int(v) and v >= 1, f"model.{name}", "must be an integer >= 1")
        need(m.init_scale > 0, "model.init_scale", "must be positive")
        need(m.policy_out_scale >= 0, "model.policy_out_scale", "must be >= 0")
        need(-5.0 <= m.log_std_init <= 1.0, "model.log_std_init", "must lie in [-5, 1]")
        b = self.blackboard
        need(_is_int(b.k) and b.k >= 1, "blackboard.k", "must be an integer >= 1")
        need(0 <= b.tau_min <= b.tau_max <= 1, "blackboard.tau_min/tau_max", "need 0 <= tau_min <= tau_max <= 1")
        need(b.tau_min <= b.tau_init <= b.tau_max, "blackboard.tau_init", "must lie within the bounds")
        need(0 < b.target_rate < 1, "blackboard.target_rate", "must lie in (0, 1)")
        need(b.threshold_lr > 0, "blackboard.threshold_lr", "must be positive")
        need(0 < b.ema_beta < 1, "blackboard.ema_beta", "must lie in (0, 1)")
        h = self.hazard
        need(h.threshold > 0, "hazard.threshold", "must be positive")
        need(_is_int(h.horizon) and h.horizon >= 0, "hazard.horizon", "must be an integer >= 0")
        need(h.loss_coef >= 0, "hazard.loss_coef", "must be >= 0")
        need(h.write_penalty >= 0, "hazard.write_penalty", "must be >= 0")
        need(_is_int(self.total_steps) and self.total_steps >= 1, "total_steps", "must be an integer >= 1")
        need(_is_int(self.n_envs) and self.n_envs >= 1, "n_envs", "must be an integer >= 1")
        need(_is_int(self.rollout_length) and self.rollout_length >= 1, "rollout_length", "must be an integer >= 1")
        need(_is_int(self.eval_interval) and self.eval_interval >= 1, "eval_interval", "must be an integer >= 1")
        need(_is_int(self.eval_episodes) and self.eval_episodes >= 1, "eval_episodes", "must be an integer >= 1")
        need(_is_int(self.seed) and self.seed >= 0, "seed", "must be an integer >= 0")
        need(_is_int(self.seeds) and self.seeds >= 1, "seeds", "must be an integer >= 1")
        if errs:
            raise ConfigError("; ".join(errs))

    # -- variant semantics --------------------------------------------------
    def resolved(self) -> "ExperimentConfig":
        """Copy with the variant's forced settings applied (idempotent)."""
        cfg = copy.deepcopy(self)
        if cfg.variant == "no-blackboard":
            cfg.blackboard.enabled = False
        elif cfg.variant == "always-write":
            cfg.blackboard.always_write = True
        elif cfg.variant == "no-hazard-loss":
            cfg.hazard.loss_coef = 0.0
        elif cfg.variant == "mappo-lag-degenerate":
            cfg.blackboard.enabled = False
            cfg.hazard.loss_coef = 0.0
            cfg.hazard.write_penalty = 0.0
        cfg.validate()
        return cfg

    @property
    def uses_message_head(self) -> bool:
        return self.blackboard.enabled or self.hazard.loss_coef > 0 or self.hazard.write_penalty > 0

    @property
    def steps_per_iteration(self) -> int:
        return self.rollout_length * self.n_envs

    @property
    def n_iterations(self) -> int:
        return max(1, -(-self.total_steps // self.steps_per_iteration))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        data.pop("extends", None)
        kwargs: dict[str, Any] = {}
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(sections))
        if unknown:
            raise ConfigError(f"unknown keys {unknown}")
        for key, value in data.items():
            sub = _SECTIONS.get(key)
            if sub is None:
                kwargs[key] = value
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            allowed = {f.name for f in dataclasses.fields(sub)}
            bad = sorted(set(value) - allowed)
            if bad:
                raise ConfigError(f"{key}: unknown keys {bad}")
            kwargs[key] = sub(**value)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


_SECTIONS = {
    "env": EnvSection,
    "ppo": PPOSection,
    "dual": DualSection,
    "model": ModelSection,
    "blackboard": BlackboardSection,
    "hazard": HazardSection,
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


_TYPE_CHECKS = {
    "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "int": _is_int,
    "bool": lambda v: isinstance(v, bool),
    "str": lambda v: isinstance(v, str),
    "dict": lambda v: isinstance(v, dict),
}


def _type_errors(cfg: "ExperimentConfig") -> list[str]:
    errs = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            if not isinstance(value, _SECTIONS[f.name]):
                errs.append(f"{f.name}: expected a mapping")
                continue
            items = [(f"{f.name}.{g.name}", g.type, getattr(value, g.name)) for g in dataclasses.fields(value)]
        else:
            items = [(f.name, f.type, value)]
        for name, kind, v in items:
            if not _TYPE_CHECKS[kind](v):
                errs.append(f"{name}: expected {kind}, got {v!r}")
    return errs


def deep_merge(base: dict, delta: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in delta.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_document(path: str | Path, _seen: tuple = ()) -> dict:
    """Read a YAML config, recursively merging any ``extends`` parent first."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"cyclic extends chain through {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    parent = doc.pop("extends", None)
    if parent is not None:
        base = load_document(path.parent / parent, _seen + (path,))
        doc = deep_merge(base, doc)
    return doc


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    doc = copy.deepcopy(doc)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        node = doc
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = value
    return doc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    doc = load_document(path) if path is not None else {}
    doc = apply_overrides(doc, overrides or [])
    return ExperimentConfig.from_dict(_coerce_numbers(doc))


def override_config(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply dotted overrides to an existing config, with the same parsing as load_config."""
    return ExperimentConfig.from_dict(_coerce_numbers(apply_overrides(cfg.to_dict(), overrides)))


def _coerce_numbers(doc):
    # YAML 1.1 reads "5e-4" as a string; accept it as a float
    if isinstance(doc, dict):
        return {k: _coerce_numbers(v) for k, v in doc.items()}
    if isinstance(doc, str):
        try:
            f = float(doc)
        except ValueError:
            return doc
        return f if any(c in doc.lower() for c in ".e") and not doc.lower().startswith(("inf", "nan")) else doc
    return doc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
