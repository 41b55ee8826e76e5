"""Plain key=value configuration files.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Values stay strings until a typed getter is applied.
"""

from __future__ import annotations

from .errors import ConfigError


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            out[key.strip()] = value.strip()
    return out


def take(raw: dict[str, str], key: str, cast, default=None):
    """Fetch and cast one config value with a helpful error."""
    if key not in raw:
        if default is None:
            raise ConfigError(f"missing config key '{key}'")
        return default
    value = raw[key]
    try:
        if cast is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return cast(value)
    except ValueError as exc:
        raise ConfigError(f"config key '{key}' has invalid value '{value}'") from exc
