"""Newline-delimited JSON files, optionally gzip-compressed (detected by extension).

Writers are byte-deterministic: keys are emitted in sorted order and gzip
streams carry a zeroed mtime, so identical objects always serialize to
identical files.
"""

from __future__ import annotations

import gzip
import io
import json
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import ParseError


def _is_gzip(path: Path) -> bool:
    return path.suffix == ".gz"


def open_text_read(path: str | Path):
    path = Path(path)
    if _is_gzip(path):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def open_text_write(path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_gzip(path):
        # mtime=0 keeps the gzip header reproducible across reruns
        return io.TextIOWrapper(gzip.GzipFile(path, "wb", mtime=0), encoding="utf-8")
    return open(path, "w", encoding="utf-8")


def dumps_canonical(obj: Any) -> str:
    """Deterministic single-line JSON encoding."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_records(path: str | Path, records: Iterable[dict]) -> None:
    with open_text_write(path) as fh:
        for rec in records:
            fh.write(dumps_canonical(rec))
            fh.write("\n")


def read_records(path: str | Path) -> Iterator[dict]:
    """Yield one decoded object per line; raises ParseError with the line number."""
    with open_text_read(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from exc
