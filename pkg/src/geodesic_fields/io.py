"""Artifact files: atomic writes, provenance header, round-trip float format."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__

FLOAT_FMT = "{:.17g}"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return FLOAT_FMT.format(x)
    return str(x)


def atomic_write_text(path, text: str) -> Path:
    """Write to a temp file in the same directory, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def header_line(command: str, seed) -> str:
    return f"# command={command} seed={seed} version={__version__}"


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], command: str, seed, extra: Sequence[str] = ()):
    """CSV with a ``#`` provenance header, optional ``#`` comment lines, then a column row."""
    buf = io.StringIO()
    buf.write(header_line(command, seed) + "\n")
    for line in extra:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path):
    """Returns ``(comment_lines, columns, rows)`` with values left as strings."""
    comments, body = [], []
    for line in Path(path).read_text().splitlines():
        (comments if line.startswith("#") else body).append(line)
    reader = list(csv.reader(body))
    if not reader:
        return comments, [], []
    return comments, reader[0], reader[1:]


def read_numeric_csv(path):
    comments, cols, rows = read_csv(path)
    return comments, cols, np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), len(cols))
