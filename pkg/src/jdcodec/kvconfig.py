"""Plain ``key = value`` config files.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
Values are parsed as int, float, ``true``/``false`` or left as strings.
Lists are written as comma-separated values and split by the consumer.
"""

from __future__ import annotations

import os


class ConfigSyntaxError(ValueError):
    pass


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSyntaxError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigSyntaxError(f"line {lineno}: empty key")
        out[key] = _coerce(value)
    return out


def load_kv(path: str | os.PathLike) -> dict:
    with open(path) as fh:
        return parse_kv(fh.read())


def dump_kv(d: dict) -> str:
    lines = []
    for k, v in d.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, (list, tuple)):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
