"""Experiment configuration: flat key-value files plus command-line overrides.

Precedence is command line > file > defaults.  Defaults follow the published
MovieLens hyper-parameters (learning rate 2.0, adversary learning rate 1.0,
lambda 8e-6, tau 1.5, 50 epochs, EMA momentum 0.9, SGD momentum 0.9, batch
1024).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .advantage import VARIANTS
from .adversary import PositConfig, parse_arch
from .baselines import CvarConfig, RerankConfig
from .ease import TrainConfig
from .exceptions import ConfigError

METHODS = ("ease", "posit", "ipw", "cvar", "rerank", "mp")
SELECT_METRICS = ("recall", "ndcg", "item_recall", "coverage")
TABLE7_BATCHES = (10, 50, 100, 500, 1000)


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    data: str = ""
    items: Optional[str] = None
    rating_threshold: float = 3.5
    min_user_interactions: int = 5
    min_item_interactions: int = 1
    n_val_users: int = 250
    n_test_users: int = 250
    heldout_fraction: float = 0.2
    # method
    method: str = "posit"
    closed_form: bool = False
    lam: float = 8e-6
    lr: float = 2.0
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 1024
    lr_schedule: str = "exponential"
    lr_decay: float = 0.95
    # POSIT
    adv_lr: float = 1.0
    adv_momentum: float = 0.9
    tau: float = 1.5
    hidden: int = 10
    m: float = 0.9
    adv_k: int = 100
    advantage_variant: str = "with_popularity"
    arch: str = "norm-tanh,norm-sigmoid"
    # baselines
    beta: float = -0.5
    alpha: float = 0.5
    beta1_lr: float = 1e-3
    t_high: float = 0.5
    t_low: float = 0.1
    # evaluation
    ks: tuple = (20, 50, 100)
    coverage_batches: tuple = (100,)
    select_metric: str = "recall"
    select_k: int = 100
    gini_k: int = 100
    # run
    seed: int = 0
    out_dir: str = "runs/run"

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, epochs=self.epochs,
                           batch_size=self.batch_size, lr_schedule=self.lr_schedule,
                           lr_decay=self.lr_decay, seed=self.seed)

    def posit_config(self) -> PositConfig:
        return PositConfig(ease_cfg=self.train_config(), lam=self.lam, adv_lr=self.adv_lr,
                           adv_momentum=self.adv_momentum, tau=self.tau, hidden=self.hidden,
                           k=self.adv_k, m=self.m, advantage_variant=self.advantage_variant,
                           arch=self.arch, select_k=self.select_k)

    def cvar_config(self) -> CvarConfig:
        return CvarConfig(alpha=self.alpha, beta1_lr=self.beta1_lr)

    def rerank_config(self) -> RerankConfig:
        return RerankConfig(t_high=self.t_high, t_low=self.t_low)

    @property
    def max_k(self) -> int:
        return max(max(self.ks), self.select_k, self.gini_k)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ks"] = list(self.ks)
        d["coverage_batches"] = list(self.coverage_batches)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return build_config(self.to_dict(), changes)


FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name, value):
    default = FIELDS[name].default
    try:
        if name in ("ks", "coverage_batches"):
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            elif not isinstance(value, (list, tuple)):
                value = [value]
            return tuple(int(v) for v in value)
        if name == "items":
            return None if value in (None, "", "none", "null") else str(value)
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Raise :class:`ConfigError` naming the first invalid field."""
    def need(ok, name, msg):
        if not ok:
            raise ConfigError(name, msg)

    need(cfg.method in METHODS, "method", f"must be one of {', '.join(METHODS)}")
    need(bool(cfg.data), "data", "a ratings CSV or an ingested .npz is required")
    need(cfg.min_user_interactions >= 1, "min_user_interactions", "must be >= 1")
    need(cfg.min_item_interactions >= 1, "min_item_interactions", "must be >= 1")
    need(cfg.n_val_users >= 1, "n_val_users", "must be >= 1")
    need(cfg.n_test_users >= 1, "n_test_users", "must be >= 1")
    need(0.0 < cfg.heldout_fraction < 1.0, "heldout_fraction", "must lie in (0, 1)")
    need(cfg.lam >= 0, "lam", "must be >= 0")
    need(cfg.lr > 0, "lr", "must be > 0")
    need(0.0 <= cfg.momentum < 1.0, "momentum", "must lie in [0, 1)")
    need(cfg.epochs >= 1, "epochs", "must be >= 1")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.lr_schedule in ("constant", "exponential"), "lr_schedule", "constant or exponential")
    need(0.0 < cfg.lr_decay <= 1.0, "lr_decay", "must lie in (0, 1]")
    need(len(cfg.ks) > 0 and min(cfg.ks) >= 1, "ks", "need at least one cutoff >= 1")
    need(len(cfg.coverage_batches) > 0 and min(cfg.coverage_batches) >= 1,
         "coverage_batches", "need at least one batch size >= 1")
    need(cfg.select_metric in SELECT_METRICS, "select_metric",
         f"must be one of {', '.join(SELECT_METRICS)}")
    need(cfg.select_k >= 1, "select_k", "must be >= 1")
    need(cfg.gini_k >= 1, "gini_k", "must be >= 1")
    if cfg.closed_form:
        need(cfg.method in ("ease", "rerank"), "closed_form", "only applies to ease and rerank")
    if cfg.method == "posit":
        need(cfg.adv_lr >= 0, "adv_lr", "must be >= 0")
        need(0.0 <= cfg.adv_momentum < 1.0, "adv_momentum", "must lie in [0, 1)")
        need(cfg.tau > 0, "tau", "must be > 0")
        need(cfg.hidden >= 1, "hidden", "must be >= 1")
        need(0.0 < cfg.m <= 1.0, "m", "must lie in (0, 1]")
        need(cfg.adv_k >= 1, "adv_k", "must be >= 1")
        need(cfg.advantage_variant in VARIANTS, "advantage_variant",
             f"must be one of {', '.join(VARIANTS)}")
        try:
            parse_arch(cfg.arch)
        except ValueError as exc:
            raise ConfigError("arch", str(exc)) from None
    if cfg.method == "cvar":
        need(0.0 < cfg.alpha <= 1.0, "alpha", "must lie in (0, 1]")
        need(cfg.beta1_lr >= 0, "beta1_lr", "must be >= 0")
    if cfg.method == "rerank":
        need(cfg.t_high >= cfg.t_low, "t_high", "must be >= t_low")
    return cfg


def build_config(*layers) -> ExperimentConfig:
    """Merge mappings left to right (later wins) over the defaults."""
    values = {}
    for layer in layers:
        for key, value in (layer or {}).items():
            key = str(key).replace("-", "_")
            if key not in FIELDS:
                raise ConfigError(key, "unknown configuration key")
            values[key] = _coerce(key, value)
    return validate(ExperimentConfig(**values))


def read_file(path) -> dict:
    """Read a flat YAML mapping; a nested ``grid`` mapping is returned as-is."""
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", f"{path} must hold a key-value mapping")
    for key, value in raw.items():
        if isinstance(value, dict) and key != "grid":
            raise ConfigError(str(key), "nested values are not supported")
    base = Path(path).resolve().parent
    for key in ("data", "items"):
        if isinstance(raw.get(key), str) and raw[key] and not Path(raw[key]).is_absolute():
            raw[key] = str((base / raw[key]).resolve())
    return raw


def parse_overrides(pairs) -> dict:
    """``["lr=1.0", "ks=20,50"]`` -> ``{"lr": "1.0", "ks": "20,50"}``."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(pair, "override must look like key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=None) -> ExperimentConfig:
    file_values = read_file(path) if path else {}
    file_values.pop("grid", None)
    return build_config(file_values, overrides or {})


@dataclass
class SweepSpec:
    grid: dict = field(default_factory=dict)
    select_metric: str = "recall"
    select_k: int = 100

    def __post_init__(self):
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise ConfigError("grid", "sweep grid must be non-empty")
        for key in self.grid:
            if key not in FIELDS:
                raise ConfigError(key, "unknown configuration key in grid")
        self.grid = {k: [_coerce(k, v) for v in vs] for k, vs in self.grid.items()}

    def points(self):
        """Every combination, the last key varying fastest."""
        keys = list(self.grid)
        combos = [{}]
        for key in keys:
            combos = [dict(c, **{key: v}) for c in combos for v in self.grid[key]]
        return combos


def parse_grid(path=None, pairs=None) -> dict:
    """Grid from a config file's ``grid`` mapping plus ``key=v1,v2`` pairs."""
    grid = {}
    if path:
        raw = read_file(path).get("grid") or {}
        if not isinstance(raw, dict):
            raise ConfigError("grid", "must be a mapping of key to list")
        for key, values in raw.items():
            grid[str(key)] = list(values) if isinstance(values, (list, tuple)) else [values]
    for key, value in parse_overrides(pairs).items():
        grid[key] = [v for v in value.split(",") if v]
    return grid
