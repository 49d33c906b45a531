"""Plain-text key-value config files: ``key = value`` lines, ``#`` comments."""

from __future__ import annotations


def parse_kv_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def as_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def as_list(raw: str) -> list[str]:
    return [piece.strip() for piece in raw.split(",") if piece.strip()]


def apply_kv(obj_fields: dict, raw: dict[str, str], path: str) -> dict:
    """Coerce raw strings onto a dataclass-style field/value dict by field type."""
    out = dict(obj_fields)
    for key, value in raw.items():
        if key not in out:
            raise ValueError(f"{path}: unknown config key {key!r}")
        current = out[key]
        if isinstance(current, bool):
            out[key] = as_bool(value)
        elif isinstance(current, int):
            out[key] = int(value)
        elif isinstance(current, float):
            out[key] = float(value)
        elif isinstance(current, list):
            out[key] = as_list(value)
        else:
            out[key] = value
    return out
