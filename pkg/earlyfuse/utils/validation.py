"""Validation helpers for flat, dotted-key configuration tables."""

from typing import Any, Dict, Iterable, Mapping

from ..errors import ConfigurationError


def flatten_keys(table: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested tables to ``{"section.key": value}``."""
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten_keys(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def reject_unknown_keys(config: Mapping[str, Any], allowed: Iterable[str]) -> None:
    """Raise ``ConfigurationError`` naming the first key not in ``allowed``.

    Args:
        config: Flat configuration with dotted keys.
        allowed: Every accepted dotted key.
    """
    allowed = set(allowed)
    unknown = sorted(key for key in config if key not in allowed)
    if unknown:
        section = unknown[0].split(".", 1)[0]
        known = sorted(key for key in allowed if key.startswith(f"{section}."))
        hint = f"; known keys in [{section}]: {', '.join(known)}" if known else ""
        raise ConfigurationError(f"Unknown configuration key '{unknown[0]}'{hint}", key=unknown[0])
