"""Flat ``key = value`` configuration files with typed, validated access.

One setting per line; ``#`` starts a comment; keys may not repeat. Commands
validate against an explicit key set so typos fail loudly, and every
validation error names the offending key.
"""

from __future__ import annotations

from .errors import ConfigError

__all__ = ["ConfigMap", "parse_config"]


def parse_config(path: str) -> "ConfigMap":
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    values: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}: line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}: line {lineno}: duplicate key '{key}'")
        values[key] = value
    return ConfigMap(values, source=path)


class ConfigMap:
    """String key/value settings with typed getters that name keys in errors."""

    _MISSING = object()

    def __init__(self, values: dict[str, str], source: str = "<config>") -> None:
        self._values = dict(values)
        self._source = source

    def __contains__(self, key: str) -> bool:
        return key in self._values

    def keys(self) -> list[str]:
        return list(self._values)

    def restrict(self, allowed: set[str]) -> None:
        unknown = sorted(set(self._values) - allowed)
        if unknown:
            raise ConfigError(
                f"{self._source}: unknown key '{unknown[0]}' "
                f"(allowed: {', '.join(sorted(allowed))})"
            )

    def _raw(self, key: str, default):
        if key in self._values:
            return self._values[key]
        if default is self._MISSING:
            raise ConfigError(f"{self._source}: missing required key '{key}'")
        return default

    def get_str(self, key: str, default=_MISSING) -> str:
        value = self._raw(key, default)
        return value if isinstance(value, str) else value

    def get_int(self, key: str, default=_MISSING) -> int:
        value = self._raw(key, default)
        if not isinstance(value, str):
            return value
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{self._source}: key '{key}': expected an integer, got '{value}'") from None

    def get_float(self, key: str, default=_MISSING) -> float:
        value = self._raw(key, default)
        if not isinstance(value, str):
            return value
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{self._source}: key '{key}': expected a real number, got '{value}'") from None

    def get_bool(self, key: str, default=_MISSING) -> bool:
        value = self._raw(key, default)
        if not isinstance(value, str):
            return value
        lowered = value.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{self._source}: key '{key}': expected true/false, got '{value}'")

    def get_floats(self, key: str, default=_MISSING) -> tuple[float, ...]:
        value = self._raw(key, default)
        if not isinstance(value, str):
            return value
        try:
            return tuple(float(part.strip()) for part in value.split(",") if part.strip())
        except ValueError:
            raise ConfigError(
                f"{self._source}: key '{key}': expected comma-separated reals, got '{value}'"
            ) from None

    def get_ints(self, key: str, default=_MISSING) -> tuple[int, ...]:
        value = self._raw(key, default)
        if not isinstance(value, str):
            return value
        try:
            return tuple(int(part.strip()) for part in value.split(",") if part.strip())
        except ValueError:
            raise ConfigError(
                f"{self._source}: key '{key}': expected comma-separated integers, got '{value}'"
            ) from None
