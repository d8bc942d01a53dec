"""Dotted ``section.key=value`` configuration text with override merging."""

from __future__ import annotations

from pathlib import Path


class ConfigSyntaxError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSyntaxError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or any(not part for part in key.split(".")):
            raise ConfigSyntaxError(f"line {lineno}: malformed key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def parse_overrides(items) -> dict[str, str]:
    return parse_config_text("\n".join(items or []))


def merge(*layers: dict[str, str]) -> dict[str, str]:
    """Later layers win."""
    out: dict[str, str] = {}
    for layer in layers:
        out.update(layer)
    return out


def section(settings: dict[str, str], name: str) -> dict[str, str]:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in settings.items() if k.startswith(prefix)}


def dump(settings: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in settings.items())
