"""TOML experiment configs and ``KEY=VALUE`` command-line overrides."""
from __future__ import annotations

import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SUITE_KEYS = ("methods", "modes", "seeds")


def load_config_file(path) -> tuple[dict, dict]:
    """``(experiment fields, suite section)`` from a TOML file.

    Experiment fields live at the top level; an optional ``[suite]`` table
    lists ``methods``, ``modes`` and ``seeds`` for ``run-suite``.
    """
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    suite = data.pop("suite", {}) or {}
    unknown = set(suite) - set(SUITE_KEYS)
    if unknown:
        raise ValueError(f"unknown [suite] keys: {sorted(unknown)}")
    return data, suite


def parse_value(text: str):
    """A TOML literal (number, bool, quoted string, array) or else the bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"override {pair!r} is not KEY=VALUE")
        out[key.strip()] = parse_value(value.strip())
    return out
