"""Newline-delimited record files with a versioned header line."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator, Union

FORMAT_VERSION = 1

PathLike = Union[str, Path]


class RecordFormatError(ValueError):
    """A record file is malformed; carries the path and 1-based line number."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


def dumps(obj) -> str:
    """Canonical single-line JSON: sorted keys, no padding, UTF-8 kept."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def header(kind: str) -> dict:
    return {"format": f"mrseg.{kind}", "version": FORMAT_VERSION}


def render_lines(kind: str, records: Iterable[dict]) -> str:
    lines = [dumps(header(kind))]
    lines.extend(dumps(r) for r in records)
    return "\n".join(lines) + "\n"


def write_records(path: PathLike, kind: str, records: Iterable[dict]) -> str:
    """Write ``records`` under a header; returns the sha256 of the bytes written."""
    data = render_lines(kind, records).encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def iter_lines(text: str, kind: str, path=None, require_header: bool = True) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)`` pairs after checking the header."""
    expected = header(kind)
    seen_header = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"invalid JSON ({exc.msg})", path, lineno) from None
        if not seen_header:
            seen_header = True
            if isinstance(rec, dict) and "format" in rec and "version" in rec and len(rec) == 2:
                if rec["format"] != expected["format"]:
                    raise RecordFormatError(
                        f"expected {expected['format']} file, found {rec['format']}", path, lineno)
                if rec["version"] != FORMAT_VERSION:
                    raise RecordFormatError(f"unsupported version {rec['version']}", path, lineno)
                continue
            if require_header:
                raise RecordFormatError("missing header line", path, lineno)
        if not isinstance(rec, dict):
            raise RecordFormatError("record is not an object", path, lineno)
        yield lineno, rec


def read_records(path: PathLike, kind: str, require_header: bool = True) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    return [rec for _, rec in iter_lines(text, kind, path, require_header)]


def id_key(value) -> tuple:
    """Total order over opaque identifiers that mix ints and strings."""
    if isinstance(value, bool):
        return (2, str(value))
    if isinstance(value, (int, float)):
        return (0, value, "")
    return (1, 0, str(value))


def sha256_file(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
