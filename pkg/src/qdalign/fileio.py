"""Small file helpers: atomic writes and commented CSV."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def format_float(v: float) -> str:
    """Stable short decimal for CSV cells."""
    return f"{float(v):.6f}"


def write_csv(
    path: str | Path,
    fieldnames: Sequence[str],
    rows: Iterable[Sequence],
    comments: Sequence[str] = (),
) -> None:
    """Write a CSV with optional leading ``# key=value`` comment lines.

    Floats are formatted with six decimals; everything else is written
    via ``str``.  The output is byte-deterministic for equal inputs.
    """
    buf = io.StringIO(newline="")
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(fieldnames))
    for row in rows:
        writer.writerow(
            [format_float(v) if isinstance(v, float) else str(v) for v in row]
        )
    atomic_write_text(path, buf.getvalue())


def read_csv(path: str | Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Read a CSV written by :func:`write_csv`.

    Returns the comment metadata (parsed from ``# key=value`` lines) and
    the data rows as dicts keyed by column name.
    """
    meta: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.readlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            stripped = line[1:].strip()
            if "=" in stripped:
                key, _, value = stripped.partition("=")
                meta[key.strip()] = value.strip()
        else:
            body_start = i
            break
    reader = csv.DictReader(lines[body_start:])
    return meta, [dict(r) for r in reader]
