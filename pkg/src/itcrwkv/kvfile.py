"""``key = value`` text files: one pair per line, ``#`` starts a comment."""
from __future__ import annotations

import dataclasses
from pathlib import Path


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_kv(pairs: dict, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {v}" for k, v in pairs.items()]
    return "\n".join(lines) + "\n"


def write_kv(path, pairs: dict, header: str | None = None) -> None:
    Path(path).write_text(format_kv(pairs, header))


def coerce(value: str, like):
    """Convert ``value`` to the type of ``like`` (a default or annotation target)."""
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if value.lower() == "none":
        return None
    return value


def update_dataclass(obj, pairs: dict[str, str]):
    """Return a copy of dataclass ``obj`` with string ``pairs`` coerced onto known fields."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for k, v in pairs.items():
        if k not in names:
            raise KeyError(k)
        current = getattr(obj, k)
        if current is None:
            # optional numeric fields
            changes[k] = None if v.lower() == "none" else float(v)
        else:
            changes[k] = coerce(v, current)
    return dataclasses.replace(obj, **changes)
