"""Tab-separated report files.

Floats are written with ``repr`` so a report read back reproduces the
numbers exactly and two runs can be compared byte for byte.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from pir.errors import MissingArtifactError


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_tsv(path, header: list[str], rows) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row {row!r} does not match header {header}")
            writer.writerow([_cell(v) for v in row])
    return p


def read_tsv(path) -> list[dict[str, str]]:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"report {p} not found")
    with p.open(newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def format_tsv(header: list[str], rows) -> str:
    lines = ["\t".join(header)]
    lines += ["\t".join(_cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"
