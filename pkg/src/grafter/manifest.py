"""Flat key=value text files used for dataset metadata, checkpoint manifests,
and run manifests. One key per line, keys sorted, values verbatim strings."""

from __future__ import annotations

from pathlib import Path

from .errors import ParseError


def write_kv(path, entries: dict[str, str]) -> None:
    lines = []
    for key in sorted(entries):
        value = str(entries[key])
        if "=" not in key and "\n" not in key and "\n" not in value:
            lines.append(f"{key}={value}")
        else:
            raise ParseError(f"key/value not representable in flat form: {key!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", line_no)
        key, _, value = line.partition("=")
        if not key:
            raise ParseError("empty key", line_no)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", line_no)
        out[key] = value
    return out


def require_keys(entries: dict[str, str], keys, where: str) -> None:
    missing = [k for k in keys if k not in entries]
    if missing:
        raise ParseError(f"{where}: missing keys {missing}")
