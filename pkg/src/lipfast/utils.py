"""utils.py :: Holds utility functions for lipfast."""

from __future__ import annotations

import csv
import pathlib
import sys
import typing as t

import numpy as np

from lipfast import logger


def spawn_generators(seed: int, count: int) -> list[np.random.Generator]:
    """Derive `count` independent generators from one seed.

    Args:
        seed: Root seed
        count: Number of streams

    Returns:
        Generators whose streams depend only on `seed` and their position

    """
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]


def write_csv(
    header: t.Sequence[str],
    rows: t.Iterable[t.Sequence[t.Any]],
    path: str | pathlib.Path | None = None,
) -> None:
    """Write rows as UTF-8 CSV with LF line endings.

    Args:
        header: Column names
        rows: One sequence per row
        path: Destination file, or stdout when None

    """
    if path is None:
        _write_rows(sys.stdout, header, rows)
        return
    with open(path, "w", encoding="utf-8", newline="") as stream:
        _write_rows(stream, header, rows)
    logger.info(f"Wrote {path}")


def _write_rows(
    stream: t.TextIO,
    header: t.Sequence[str],
    rows: t.Iterable[t.Sequence[t.Any]],
) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)


def format_table(
    headers: t.Sequence[str], rows: t.Sequence[t.Sequence[t.Any]]
) -> str:
    """Render rows as a left-aligned plain text table."""
    cells = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for row in cells:
        line = "  ".join(c.ljust(w) for c, w in zip(row, widths))
        lines.append(line.rstrip())
    return "\n".join(lines)
