"""JSON run configuration with dotted ``key=value`` overrides.

A config file has up to three sections::

    {"synth": {...OracleConfig fields...},
     "trainer": {...AvatarReconstructor parameters...},
     "eval": {"frames": null}}
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

DEFAULTS = {"synth": {}, "trainer": {}, "eval": {}}


def parse_value(text):
    """JSON literal if it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config, assignment):
    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ValueError(f"override {assignment!r} has an empty key")
    node = config
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ValueError(f"cannot set {key}: {p} is not a section")
        node = nxt
    node[parts[-1]] = parse_value(value)
    return config


def load_config(path=None, overrides=()):
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        for k, v in data.items():
            if isinstance(v, dict) and isinstance(config.get(k), dict):
                config[k].update(v)
            else:
                config[k] = v
    for item in overrides:
        apply_override(config, item)
    return config
