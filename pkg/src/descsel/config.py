"""TOML run configuration: load, validate, override, and snapshot.

Schema (all keys optional except the seed, which has no wall-clock default):

    [run]     seed, out
    [data]    path
    [episode] n_way, k_shot, queries_per_class
    [model]   d, k_neighbors, lambda1, lambda2, strategy, pool_mode,
              backbone, use_transform, transform_normalize,
              enable_support_selection, enable_query_selection
    [optim]   kind, learning_rate, decay_every, decay_factor, momentum,
              epochs, episodes_per_epoch, w_aux, two_phase
    [eval]    episodes, workers

Command-line flags override file values; `snapshot` emits the resolved
configuration back as deterministic TOML so any run can be reproduced
without the original flag list.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

try:
    import tomllib as _toml
except ModuleNotFoundError:  # python < 3.11
    import tomli as _toml

from .errors import DataFormatError, InvalidInputError

_SECTIONS = {
    "run": ("seed", "out"),
    "data": ("path",),
    "episode": ("n_way", "k_shot", "queries_per_class"),
    "model": ("d", "k_neighbors", "lambda1", "lambda2", "strategy", "pool_mode",
              "backbone", "use_transform", "transform_normalize",
              "enable_support_selection", "enable_query_selection"),
    "optim": ("kind", "learning_rate", "decay_every", "decay_factor", "momentum",
              "epochs", "episodes_per_epoch", "w_aux", "two_phase"),
    "eval": ("episodes", "workers"),
}


@dataclass
class RunConfig:
    seed: Optional[int] = None
    out: str = "run"
    path: Optional[str] = None
    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 15
    d: Optional[int] = None
    k_neighbors: int = 1
    lambda1: float = 10.0
    lambda2: float = 10.0
    strategy: str = "adaptive"
    pool_mode: str = "union"
    backbone: str = "identity"
    use_transform: bool = False
    transform_normalize: bool = True
    enable_support_selection: bool = True
    enable_query_selection: bool = True
    kind: str = "adam"
    learning_rate: float = 1e-3
    decay_every: int = 10
    decay_factor: float = 0.1
    momentum: float = 0.9
    epochs: int = 30
    episodes_per_epoch: int = 200
    w_aux: float = 1.0
    two_phase: bool = False
    episodes: int = 600
    workers: int = 1

    def require_seed(self) -> int:
        if self.seed is None:
            raise InvalidInputError("a seed is required (config [run].seed or --seed)")
        return int(self.seed)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_KEY_SECTION = {key: section for section, keys in _SECTIONS.items() for key in keys}


def load_config(path: Optional[str] = None) -> RunConfig:
    """Read a TOML file into a RunConfig; unknown keys are an error."""
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path, "rb") as f:
            doc = _toml.load(f)
    except FileNotFoundError as e:
        raise DataFormatError(f"config file not found: {path}") from e
    except _toml.TOMLDecodeError as e:
        raise DataFormatError(f"{path}: invalid TOML: {e}") from e
    updates = {}
    for section, table in doc.items():
        if section not in _SECTIONS:
            raise DataFormatError(f"{path}: unknown config section [{section}]")
        if not isinstance(table, dict):
            raise DataFormatError(f"{path}: [{section}] must be a table")
        for key, value in table.items():
            if key not in _SECTIONS[section]:
                raise DataFormatError(f"{path}: unknown key {key!r} in [{section}]")
            updates[key] = value
    return replace(cfg, **updates)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Non-None overrides win over file values."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    unknown = set(updates) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise InvalidInputError(f"unknown config overrides: {sorted(unknown)}")
    return replace(cfg, **updates)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    raise InvalidInputError(f"cannot serialize config value {value!r}")


def snapshot(cfg: RunConfig) -> str:
    """Deterministic TOML text of the resolved configuration.

    Section and key order are fixed; None values are omitted.  Reparsing the
    snapshot reproduces the config exactly.
    """
    lines = []
    for section, keys in _SECTIONS.items():
        body = [f"{key} = {_format_value(getattr(cfg, key))}"
                for key in keys if getattr(cfg, key) is not None]
        if body:
            lines.append(f"[{section}]")
            lines.extend(body)
            lines.append("")
    return "\n".join(lines)
