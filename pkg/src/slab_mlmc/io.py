"""Output files. Each file starts with a header carrying the config hash, seed and
package version; floats are written with 17 significant digits."""
from __future__ import annotations

import json
import math
import os

from . import __version__


def fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else format(value, ".17g")
    if isinstance(value, (list, tuple)):
        return ";".join(fmt(v) for v in value)
    return str(value)


def header_lines(config, command):
    return [
        f"# slab-mlmc {__version__}",
        f"# command: {command}",
        f"# config_hash: {config.digest()}",
        f"# seed: {config.seed}",
    ]


def write_csv(path, config, command, columns, rows):
    lines = header_lines(config, command) + [",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} fields, expected {len(columns)}")
        lines.append(",".join(fmt(v) for v in row))
    _write(path, "\n".join(lines) + "\n")


def write_text(path, config, command, pairs):
    """``key = value`` lines under the standard header."""
    lines = header_lines(config, command) + [f"{k} = {fmt(v)}" for k, v in pairs]
    _write(path, "\n".join(lines) + "\n")


def write_json(path, config, command, payload):
    """JSON has no comments, so the header is the leading ``header`` object."""
    doc = {"header": {"package": "slab-mlmc", "version": __version__, "command": command,
                      "config_hash": config.digest(), "seed": config.seed}}
    doc.update(payload)
    _write(path, json.dumps(doc, indent=2, default=_json_default) + "\n")


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def read_csv(path):
    """(columns, rows of strings), skipping header comments."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    if not lines:
        return [], []
    return lines[0].split(","), [ln.split(",") for ln in lines[1:] if ln]


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
