"""CSV plumbing shared by the file formats: UTF-8, comma, mandatory header.

Floats are written with ``repr`` (shortest round-trip form) so identical
computations produce byte-identical files. Lines starting with ``#`` hold
provenance key=value pairs and are skipped on read.
"""

from __future__ import annotations

import csv


def fmt(value) -> str:
    """Round-trip text form of a float (ints pass through unchanged)."""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def provenance_line(provenance: dict | None) -> str | None:
    if not provenance:
        return None
    parts = " ".join(f"{k}={provenance[k]}" for k in sorted(provenance))
    return f"# {parts}"


def write_csv(path, header: list[str], rows, provenance: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        line = provenance_line(provenance)
        if line:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def read_rows(path, expected_header: list[str]) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError(f"{path}: missing header row") from None
    if header != expected_header:
        raise ValueError(
            f"{path}: header {header!r} does not match expected {expected_header!r}"
        )
    return [dict(zip(header, row)) for row in reader if row]
