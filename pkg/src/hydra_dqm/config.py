"""Typed runtime configuration.

Config is a flat tree of dotted keys (``catalog.db_path``,
``gatekeeper.sample_rate``, ...) loaded from a YAML file and optionally
patched by ``--set key=value`` command-line overrides; overrides win.
The default config path is ``hydra.yaml`` in the working directory and
can be replaced with the ``HYDRA_CONFIG`` environment variable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from .errors import ConfigInvalid

DEFAULT_CONFIG_FILENAME = "hydra.yaml"
CONFIG_ENV_VAR = "HYDRA_CONFIG"

_DEFAULTS: dict[str, Any] = {
    "catalog.db_path": "hydra.db",
    "gatekeeper.poll_interval_s": 60.0,
    "gatekeeper.sample_rate": 0.05,
    "gatekeeper.sample_seed": 0,
    "gatekeeper.log_path": "gatekeeper.log",
    "dataset.train_fraction": 0.95,
    "dataset.undersample_ratio": 1.0,
    "dataset.seed": 0,
    "service.bind_addr": "127.0.0.1:8000",
}


@dataclass
class Config:
    """Resolved configuration with defaults applied.

    ``values`` holds every dotted key; the typed accessors below are the
    ones the pipeline actually reads.
    """

    values: dict[str, Any] = field(default_factory=dict)

    def get(self, key: str, default: Any = None) -> Any:
        if key in self.values:
            return self.values[key]
        if key in _DEFAULTS:
            return _DEFAULTS[key]
        return default

    # -- typed accessors -------------------------------------------------

    @property
    def db_path(self) -> str:
        return str(self.get("catalog.db_path"))

    @property
    def roots(self) -> list[dict[str, str]]:
        """List of ``{root_id, base_path}`` mappings."""
        raw = self.get("roots", [])
        if not isinstance(raw, list):
            raise ConfigInvalid("roots must be a list")
        roots = []
        for entry in raw:
            if not isinstance(entry, dict) or "root_id" not in entry or "base_path" not in entry:
                raise ConfigInvalid(f"root entry must have root_id and base_path: {entry!r}")
            roots.append({"root_id": str(entry["root_id"]), "base_path": str(entry["base_path"])})
        return roots

    @property
    def poll_interval_s(self) -> float:
        v = float(self.get("gatekeeper.poll_interval_s"))
        if v < 1.0:
            raise ConfigInvalid("gatekeeper.poll_interval_s must be >= 1")
        return v

    @property
    def sample_rate(self) -> float:
        v = float(self.get("gatekeeper.sample_rate"))
        if not 0.0 <= v <= 1.0:
            raise ConfigInvalid("gatekeeper.sample_rate must be in [0, 1]")
        return v

    @property
    def sample_seed(self) -> int:
        return int(self.get("gatekeeper.sample_seed"))

    @property
    def gatekeeper_log_path(self) -> str:
        return str(self.get("gatekeeper.log_path"))

    @property
    def train_fraction(self) -> float:
        v = float(self.get("dataset.train_fraction"))
        if not 0.0 < v < 1.0:
            raise ConfigInvalid("dataset.train_fraction must be in (0, 1)")
        return v

    @property
    def undersample_ratio(self) -> float:
        v = float(self.get("dataset.undersample_ratio"))
        if v < 1.0:
            raise ConfigInvalid("dataset.undersample_ratio must be >= 1.0")
        return v

    @property
    def dataset_seed(self) -> int:
        return int(self.get("dataset.seed"))

    @property
    def bind_addr(self) -> str:
        return str(self.get("service.bind_addr"))

    def class_weights(self) -> dict[str, int]:
        """Per-class manifest replication counts, ``dataset.class_weight.<class>``."""
        weights = {}
        prefix = "dataset.class_weight."
        for key, value in self.values.items():
            if key.startswith(prefix):
                weights[key[len(prefix):]] = int(value)
        return weights

    def class_sets(self) -> dict[str, dict[str, list[str]]]:
        """Per-plot-type class sets declared under ``class_sets``."""
        raw = self.get("class_sets", {})
        if not isinstance(raw, dict):
            raise ConfigInvalid("class_sets must be a mapping of plot_type -> {classes, alarm_classes}")
        out = {}
        for plot_type, entry in raw.items():
            if not isinstance(entry, dict) or "classes" not in entry:
                raise ConfigInvalid(f"class_sets.{plot_type} must declare classes")
            out[str(plot_type)] = {
                "classes": [str(c) for c in entry["classes"]],
                "alarm_classes": [str(c) for c in entry.get("alarm_classes", [])],
            }
        return out

    def users(self) -> list[dict[str, Any]]:
        """Bootstrap users: ``{user, token, admin}`` entries ensured at startup."""
        raw = self.get("users", [])
        if not isinstance(raw, list):
            raise ConfigInvalid("users must be a list")
        out = []
        for entry in raw:
            if not isinstance(entry, dict) or "user" not in entry:
                raise ConfigInvalid(f"user entry must name a user: {entry!r}")
            out.append({
                "user": str(entry["user"]),
                "token": str(entry["token"]) if entry.get("token") is not None else None,
                "admin": bool(entry.get("admin", False)),
            })
        return out


def _flatten(tree: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    """Flatten nested mappings into dotted keys; lists stay as values."""
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _coerce(text: str) -> Any:
    """Parse an override value the way YAML would."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def load_config(path: str | None = None, overrides: list[str] | None = None) -> Config:
    """Load config from ``path`` (or HYDRA_CONFIG, or ./hydra.yaml) and apply overrides.

    A missing file is an error only when a path was explicitly given;
    otherwise all defaults apply. Each override is ``dotted.key=value``.
    """
    explicit = path is not None
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR, DEFAULT_CONFIG_FILENAME)

    values: dict[str, Any] = {}
    if os.path.exists(path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                tree = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigInvalid(f"cannot parse {path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigInvalid(f"{path} must contain a mapping at top level")
        # roots/users/class_sets keep structure; everything else flattens
        for special in ("roots", "users", "class_sets"):
            if special in tree:
                values[special] = tree.pop(special)
        values.update(_flatten(tree))
    elif explicit or CONFIG_ENV_VAR in os.environ:
        raise ConfigInvalid(f"config file not found: {path}")

    for item in overrides or []:
        if "=" not in item:
            raise ConfigInvalid(f"override must be key=value: {item!r}")
        key, _, text = item.partition("=")
        values[key.strip()] = _coerce(text.strip())

    return Config(values=values)
