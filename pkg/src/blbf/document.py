"""Plain-text key/value documents used for reports, audits and model files.

A document is a header block followed by ``[section]`` blocks of
``key = value`` lines. Floats are written with 17 significant digits so that
parsing a document back yields bit-identical values.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Mapping

import numpy as np

from blbf import __version__

NA = "NA"

Section = Dict[str, str]


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def format_value(value: Any) -> str:
    if value is None:
        return NA
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return fmt_float(value)
    if isinstance(value, np.ndarray):
        value = value.ravel().tolist()
    if isinstance(value, (list, tuple)):
        return " ".join(format_value(v) for v in value)
    text = str(value)
    if "\n" in text:
        raise ValueError(f"document values must be single-line, got {text!r}")
    return text


def config_digest(config: Mapping[str, Any]) -> str:
    """SHA-256 over a canonical JSON rendering of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def render(kind: str, sections: Mapping[str, Mapping[str, Any]],
           config: Mapping[str, Any] | None = None) -> str:
    lines = [
        "# blbf document",
        f"kind = {kind}",
        f"toolkit_version = {__version__}",
    ]
    if config is not None:
        lines.append(f"config_digest = {config_digest(config)}")
    for name, body in sections.items():
        lines.append("")
        lines.append(f"[{name}]")
        for key, value in body.items():
            lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def parse(text: str) -> Dict[str, Section]:
    """Parse a document into ``{section: {key: raw value}}``.

    Header keys live under the ``""`` section.
    """
    out: Dict[str, Section] = {"": {}}
    current = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current in out:
                raise ValueError(f"line {lineno}: duplicate section [{current}]")
            out[current] = {}
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        out[current][key.strip()] = value.strip()
    return out


def as_float(value: str) -> float | None:
    return None if value == NA else float(value)


def as_floats(value: str) -> np.ndarray:
    if not value:
        return np.zeros(0)
    return np.array([float(v) for v in value.split()], dtype=float)


def as_ints(value: str) -> List[int]:
    return [int(v) for v in value.split()] if value else []


def write_atomic(path: str | os.PathLike, text: str) -> Path:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path

