"""Strict experiment and generator configuration schemas.

Configs are plain JSON objects.  Unknown keys, missing required fields and
type mismatches are all rejected so a typo can never silently fall back to
a default.
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np

from .datagen import MODELS, ConfigError, GeneratorConfig

_INT_PARAMS = {"strategy", "memory_order"}
_FLOAT_PARAMS = {"bias", "eta", "kappa", "visibility"}
_STR_PARAMS = {"schedule"}
_LIST_PARAMS = {"weights", "angles_a", "angles_b"}
FAMILY_PARAMS = _INT_PARAMS | _FLOAT_PARAMS | _STR_PARAMS | _LIST_PARAMS


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class FamilySpec:
    """A generator model plus fixed values or ``[lo, hi]`` uniform ranges for its parameters."""

    model: str
    share: float = 1.0
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if not self.share > 0:
            raise ConfigError("share must be positive")
        for key, value in self.params.items():
            if key not in FAMILY_PARAMS:
                raise ConfigError(f"unknown generator parameter {key!r}")
            if key in _FLOAT_PARAMS | _INT_PARAMS:
                ok = _is_number(value) or (
                    isinstance(value, list) and len(value) == 2 and all(_is_number(v) for v in value)
                    and value[0] <= value[1]
                )
                if not ok:
                    raise ConfigError(f"parameter {key!r} must be a number or an increasing [lo, hi] pair")
            elif key in _STR_PARAMS and not isinstance(value, str):
                raise ConfigError(f"parameter {key!r} must be a string")
            elif key in _LIST_PARAMS and not (isinstance(value, list) and all(_is_number(v) for v in value)):
                raise ConfigError(f"parameter {key!r} must be a list of numbers")

    def sample(self, trials_per_context: int, seed: int, rng: np.random.Generator) -> GeneratorConfig:
        """Draw one concrete generator config from this family."""
        kwargs: dict[str, Any] = {}
        for key in sorted(self.params):
            value = self.params[key]
            if key in _INT_PARAMS:
                kwargs[key] = int(rng.integers(value[0], value[1] + 1)) if isinstance(value, list) else int(value)
            elif key in _FLOAT_PARAMS:
                kwargs[key] = float(rng.uniform(value[0], value[1])) if isinstance(value, list) else float(value)
            elif key in _LIST_PARAMS:
                kwargs[key] = tuple(float(v) for v in value)
            else:
                kwargs[key] = value
        return GeneratorConfig(model=self.model, trials_per_context=trials_per_context, seed=seed, **kwargs)


@dataclass(frozen=True)
class AblationConfig:
    """ROC ablation: envelopes trained on classical families, tested on a mixed pool."""

    seed: int
    reference: FamilySpec
    lhv_families: list[FamilySpec]
    quantum_families: list[FamilySpec]
    trials_per_context: int = 500
    reference_trials_per_context: int = 6000
    n_train: int = 200
    n_test_classical: int = 150
    n_test_quantum: int = 150
    alpha: float = 0.1
    pseudo_count: float = 1.0
    target_fpr: float = 0.05

    def __post_init__(self) -> None:
        _check_common(self)
        if not self.lhv_families or not self.quantum_families:
            raise ConfigError("need at least one classical and one quantum family")
        for f in self.lhv_families + [self.reference]:
            if not f.model.startswith("lhv-"):
                raise ConfigError(f"classical family uses non-classical model {f.model!r}")
        for name in ("n_train", "n_test_classical", "n_test_quantum", "reference_trials_per_context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass(frozen=True)
class LeakageConfig:
    """Same- versus cross-distribution calibration of a conformity score."""

    seed: int
    quantum: FamilySpec
    quantum_cross: FamilySpec
    classical: list[FamilySpec]
    trials_per_context: int = 500
    calibration_trials_per_context: int = 4000
    n_test: int = 100
    pseudo_count: float = 1.0

    def __post_init__(self) -> None:
        _check_common(self)
        if not self.classical:
            raise ConfigError("need at least one classical family")
        if self.n_test < 2:
            raise ConfigError("n_test must be >= 2")
        if self.calibration_trials_per_context < 2:
            raise ConfigError("calibration_trials_per_context must be >= 2")


def _check_common(cfg: Any) -> None:
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2**64)")
    if cfg.trials_per_context < 1:
        raise ConfigError("trials_per_context must be >= 1")
    if not cfg.pseudo_count > 0:
        raise ConfigError("pseudo_count must be positive")
    for name in ("alpha", "target_fpr"):
        if hasattr(cfg, name) and not 0.0 < getattr(cfg, name) < 1.0:
            raise ConfigError(f"{name} must lie in (0, 1)")


CONFIG_KINDS = {
    "generator": GeneratorConfig,
    "ablation": AblationConfig,
    "leakage": LeakageConfig,
}


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        elem = args[0] if args else Any
        items = [_coerce(elem, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return dict(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if not _is_number(value) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls: type, data: Any, where: str | None = None) -> Any:
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    where = where or cls.__name__
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"{name} required")
            continue
        kwargs[name] = _coerce(hints[name], data[name], f"{where}.{name}")
    return cls(**kwargs)


def to_dict(cfg: Any) -> dict[str, Any]:
    """JSON-ready dict of a config dataclass (tuples become lists)."""
    def convert(v: Any) -> Any:
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [convert(x) for x in v]
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        return v
    return convert(cfg)
