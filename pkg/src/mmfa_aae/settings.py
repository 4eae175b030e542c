"""Text encoding of config values (``key = value`` files and checkpoint headers)."""

from __future__ import annotations


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def parse_value(text: str, like):
    """Parse ``text`` into the type of the example value ``like``."""
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        element = like[0] if like else 0.0
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        return tuple(parse_value(p, element) for p in parts)
    return text
