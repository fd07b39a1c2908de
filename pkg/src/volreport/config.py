"""Layered run configuration for the CLI: defaults < file < env < flags.

Every resolved value remembers where it came from, and the CLI prints the
full table at startup so runs are reproducible from their logs alone.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

ENV_PREFIX = "VOLREPORT_"


@dataclass
class Resolved:
    value: object
    source: str  # default | file | env | flag


class RunConfig:
    """Flat key/value config with provenance tracking."""

    def __init__(self, defaults: dict):
        self._items: dict[str, Resolved] = {
            k: Resolved(v, "default") for k, v in defaults.items()
        }

    def apply_file(self, path) -> None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for k, v in data.items():
            if k not in self._items:
                raise ConfigError(f"unknown config key {k!r} in {path}")
            self._items[k] = Resolved(v, "file")

    def apply_env(self, environ=None) -> None:
        environ = os.environ if environ is None else environ
        for key, res in list(self._items.items()):
            env_key = ENV_PREFIX + key.upper()
            if env_key in environ:
                self._items[key] = Resolved(
                    _parse_like(environ[env_key], res.value), "env"
                )

    def apply_flags(self, flags: dict) -> None:
        for k, v in flags.items():
            if v is None:
                continue
            if k not in self._items:
                raise ConfigError(f"unknown config flag {k!r}")
            self._items[k] = Resolved(v, "flag")

    def __getitem__(self, key: str):
        return self._items[key].value

    def get(self, key: str, default=None):
        res = self._items.get(key)
        return default if res is None else res.value

    def to_dict(self) -> dict:
        return {k: r.value for k, r in self._items.items()}

    def provenance_lines(self) -> list[str]:
        width = max(len(k) for k in self._items)
        return [
            f"  {k.ljust(width)} = {r.value!r}  ({r.source})"
            for k, r in self._items.items()
        ]


def _parse_like(raw: str, template) -> object:
    """Parse an env string with the type of the default it overrides."""
    if isinstance(template, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int) and not isinstance(template, bool):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, (list, tuple)) or template is None:
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw
