"""YAML config files with line-aware error messages."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


def _lines(node, prefix="") -> dict[str, int]:
    """Map dotted keys to 1-based source lines."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}{k.value}"
            out[key] = k.start_mark.line + 1
            out.update(_lines(v, key + "."))
    return out


class ConfigFile(dict):
    """A parsed mapping that remembers where each key was written."""

    def __init__(self, data: dict, lines: dict[str, int], source: str = ""):
        super().__init__(data)
        self.lines = lines
        self.source = source

    def line_of(self, dotted: str) -> int | None:
        return self.lines.get(dotted)

    def error(self, message: str, dotted: str) -> ConfigError:
        return ConfigError(message, field=dotted, line=self.line_of(dotted))


def parse(text: str, source: str = "<string>") -> ConfigFile:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"{source}: invalid YAML: {getattr(e, 'problem', e)}", line=mark.line + 1 if mark else None) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping", line=1)
    return ConfigFile(data, _lines(node), source)


def load(path: str | Path) -> ConfigFile:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return parse(p.read_text(), str(p))


def set_dotted(d: dict, dotted: str, value: Any) -> None:
    """``set_dotted(cfg, "prior.n_rows", [64, 64])``; used for flag overrides."""
    parts = dotted.split(".")
    for part in parts[:-1]:
        d = d.setdefault(part, {})
    d[parts[-1]] = value
