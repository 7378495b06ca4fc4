"""Prompt templates stored as text assets with ⟨placeholder⟩ slots."""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

_HEADER = re.compile(r"^\[template (\w+) (v\d+)\]\n")
_SLOT = re.compile(r"⟨(\w+)⟩")


@lru_cache(maxsize=None)
def load_template(name: str) -> tuple[str, str]:
    """Return ``(version, body)`` for a bundled template."""
    raw = resources.files("ipercept.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    m = _HEADER.match(raw)
    if not m:
        return "v0", raw.rstrip("\n")
    return m.group(2), raw[m.end() :].rstrip("\n")


def slots(name: str) -> set[str]:
    return set(_SLOT.findall(load_template(name)[1]))


def fill(name: str, **values) -> str:
    """Substitute every slot; a missing value is an error, extras are ignored."""
    body = load_template(name)[1]

    def sub(m: re.Match) -> str:
        key = m.group(1)
        if key not in values:
            raise KeyError(f"template {name!r} needs a value for {key!r}")
        return str(values[key])

    return _SLOT.sub(sub, body)
