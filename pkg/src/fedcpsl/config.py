"""Experiment configuration: typed flat ``key = value`` files with flag overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Union

from .baselines import AlgorithmKind

DATASETS = ("blobs", "mnist_subset")
PSEUDO_LABEL_MODES = ("closed_form", "gd")
WEIGHTINGS = ("size", "uniform")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fedcpsl"
    dataset: str = "blobs"
    n_clients: int = 20
    participants: int = 2
    rounds: int = 100
    epsilon: float = 0.9
    test_frac: float = 0.2
    beta: Union[float, tuple] = 0.75
    gamma: float = 0.8
    eta: float = 0.005
    eta_c: Optional[float] = None  # None means 2 * eta
    eta_g: Optional[float] = None  # None means auto: mean effective steps of the round
    eta_v: float = 0.1
    alpha_p: float = 1.0
    alpha_r: float = 0.5
    s_l: int = 32
    s_u: int = 32
    epoch_min: int = 2
    epoch_max: int = 2
    shards_per_client: int = 2
    seed: int = 0
    full_batch: bool = False
    pseudo_label_mode: str = "closed_form"
    weighting: str = "size"
    L_estimate: Optional[float] = None
    hidden: tuple = (32,)
    activation: str = "tanh"
    n_samples: int = 2000
    blob_classes: int = 3
    blob_dim: int = 5
    blob_per_class: int = 200
    blob_spread: float = 1.0
    accuracy_threshold: float = 0.9
    record_timing: bool = False

    def __post_init__(self):
        try:
            AlgorithmKind(self.algorithm)
        except ValueError:
            raise ConfigError("algorithm", f"unknown algorithm {self.algorithm!r}") from None
        _choice("dataset", self.dataset, DATASETS)
        _choice("pseudo_label_mode", self.pseudo_label_mode, PSEUDO_LABEL_MODES)
        _choice("weighting", self.weighting, WEIGHTINGS)
        for key in ("n_clients", "participants", "s_l", "s_u", "epoch_min", "epoch_max",
                    "shards_per_client", "n_samples", "blob_classes", "blob_dim", "blob_per_class"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be a positive integer, got {getattr(self, key)}")
        if self.rounds < 0:
            raise ConfigError("rounds", "must be nonnegative")
        if self.participants > self.n_clients:
            raise ConfigError("participants", f"m={self.participants} exceeds n_clients={self.n_clients}")
        if self.epoch_min > self.epoch_max:
            raise ConfigError("epoch_min", "must not exceed epoch_max")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", f"must lie in [0, 1), got {self.gamma}")
        for key in ("epsilon", "test_frac"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(key, f"must lie in [0, 1), got {getattr(self, key)}")
        betas = self.beta if isinstance(self.beta, tuple) else (self.beta,)
        if any(not 0.0 <= b <= 1.0 for b in betas):
            raise ConfigError("beta", f"every beta must lie in [0, 1], got {self.beta}")
        if isinstance(self.beta, tuple) and len(self.beta) != self.n_clients:
            raise ConfigError("beta", f"{len(self.beta)} per-client values for {self.n_clients} clients")
        for key in ("eta", "eta_v"):
            if getattr(self, key) <= 0:
                raise ConfigError(key, "must be positive")
        for key in ("eta_c", "eta_g", "L_estimate"):
            val = getattr(self, key)
            if val is not None and val <= 0:
                raise ConfigError(key, "must be positive when given")
        if self.alpha_p < 0 or self.alpha_r < 0:
            raise ConfigError("alpha_p" if self.alpha_p < 0 else "alpha_r", "must be nonnegative")
        if self.pseudo_label_mode == "closed_form" and self.alpha_r == 0:
            raise ConfigError("alpha_r", "closed_form pseudo labels need alpha_r > 0; use pseudo_label_mode = gd")
        if self.blob_spread < 0:
            raise ConfigError("blob_spread", "must be nonnegative")
        if not 0.0 <= self.accuracy_threshold <= 1.0:
            raise ConfigError("accuracy_threshold", "must lie in [0, 1]")

    @property
    def kind(self) -> AlgorithmKind:
        return AlgorithmKind(self.algorithm)

    @property
    def eta_c_value(self) -> float:
        return 2.0 * self.eta if self.eta_c is None else self.eta_c

    def betas(self) -> tuple:
        if isinstance(self.beta, tuple):
            return self.beta
        return (float(self.beta),) * self.n_clients

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)


def _choice(key, value, allowed):
    if value not in allowed:
        raise ConfigError(key, f"{value!r} is not one of {allowed}")


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text, none_word):
    text = text.strip()
    if text.lower() in (none_word, "none", ""):
        return None
    return float(text)


def _parse_int_tuple(text):
    text = text.strip()
    return tuple(int(p) for p in text.split(",") if p.strip()) if text else ()


def _parse_beta(text):
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) == 1:
        return float(parts[0])
    return tuple(float(p) for p in parts)


_PARSERS = {
    "eta_c": lambda s: _parse_optional_float(s, "auto"),
    "eta_g": lambda s: _parse_optional_float(s, "auto"),
    "L_estimate": lambda s: _parse_optional_float(s, "none"),
    "beta": _parse_beta,
    "hidden": _parse_int_tuple,
}
_FIELD_TYPES = {f.name: f.default for f in fields(ExperimentConfig)}


def parse_value(key: str, text: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(key, "unknown configuration key")
    try:
        if key in _PARSERS:
            return _PARSERS[key](text)
        default = _FIELD_TYPES[key]
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text.strip())
        if isinstance(default, float):
            return float(text.strip())
        return text.strip()
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {text!r}: {exc}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def parse_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then the file's values, then ``overrides`` (already typed or raw strings)."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for key, val in (overrides or {}).items():
        values[key] = parse_value(key, val) if isinstance(val, str) else val
    return ExperimentConfig(**values)


def _render(key, value):
    if value is None:
        return "auto" if key in ("eta_c", "eta_g") else "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_render(f.name, getattr(config, f.name))}\n" for f in fields(config))
