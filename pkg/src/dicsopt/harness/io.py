"""CSV writers and readers for traces, aggregates, spectra and error sequences.

Every float is written with ``%.17g`` so a read-back is bit-exact. Integer
columns (step and index counters) are written as integers. Schemas are
identified by their exact header row; see ``docs/formats.md``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..engines import TRACE_COLUMNS

TRACE_HEADER = ",".join(TRACE_COLUMNS)
AGG_COLUMNS = ("t",) + tuple(f"{c}_{s}" for c in TRACE_COLUMNS[1:] for s in ("mean", "std"))
SPECTRA_COLUMNS = ("seed", "q", "window", "coordinate", "lambda2_m", "lambda2_b")
U_COLUMNS = ("block", "t", "u_consensus", "u_optimality", "u_tracking",
             "ut_consensus", "ut_optimality", "ut_tracking")
INT_COLUMNS = {"t", "seed", "window", "coordinate", "block"}

SCHEMAS = {
    "trace": TRACE_COLUMNS,
    "aggregate": AGG_COLUMNS,
    "spectra": SPECTRA_COLUMNS,
    "u_sequence": U_COLUMNS,
}


class FormatError(ValueError):
    """A CSV file does not match any documented schema."""


def _fmt(col, value):
    if col in INT_COLUMNS:
        return str(int(value))
    return "%.17g" % float(value)


def write_table(path, columns: dict, order) -> Path:
    """Write ``columns`` (name -> 1-D array) in ``order`` with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lengths = {len(columns[c]) for c in order}
    if len(lengths) > 1:
        raise ValueError(f"columns have unequal lengths {sorted(lengths)}")
    nrow = lengths.pop() if lengths else 0
    with path.open("w", newline="") as fh:
        fh.write(",".join(order) + "\n")
        for r in range(nrow):
            fh.write(",".join(_fmt(c, columns[c][r]) for c in order) + "\n")
    return path


def export_csv(trace, path) -> Path:
    """Write one run's recorded rows under the trace header.

    ``trace`` is a :class:`~dicsopt.engines.RunTrace` or a column mapping.
    """
    cols = trace.columns if hasattr(trace, "columns") else trace
    return write_table(path, cols, TRACE_COLUMNS)


def read_table(path, schema: str | None = None) -> dict:
    """Parse a CSV written by this package; the header selects the schema.

    Raises
    ------
    FormatError
        On an unknown header, a header/schema mismatch, ragged rows or
        unparsable values.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = tuple(rows[0])
    found = next((k for k, v in SCHEMAS.items() if v == header), None)
    if found is None:
        raise FormatError(f"{path}: unrecognized header {','.join(header)}")
    if schema is not None and found != schema:
        raise FormatError(f"{path}: expected a {schema} file, found {found}")
    body = rows[1:]
    for k, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{k}: expected {len(header)} fields, got {len(row)}")
    out = {}
    for j, col in enumerate(header):
        raw = [row[j] for row in body]
        try:
            if col in INT_COLUMNS:
                out[col] = np.array([int(v) for v in raw], dtype=np.int64)
            else:
                out[col] = np.array([float(v) for v in raw], dtype=float)
        except ValueError as exc:
            raise FormatError(f"{path}: column {col}: {exc}") from exc
    return out


def read_csv(path) -> dict:
    """Read a trace CSV back into columns."""
    return read_table(path, "trace")


def aggregate(traces) -> dict:
    """Mean and population std per recorded step across replicas.

    All replicas must share the same recorded step grid.
    """
    cols = [t.columns if hasattr(t, "columns") else t for t in traces]
    if not cols:
        raise ValueError("nothing to aggregate")
    t0 = np.asarray(cols[0]["t"])
    for c in cols[1:]:
        if not np.array_equal(np.asarray(c["t"]), t0):
            raise ValueError("replicas were recorded on different step grids")
    out = {"t": t0}
    for name in TRACE_COLUMNS[1:]:
        stack = np.stack([np.asarray(c[name], dtype=float) for c in cols])
        out[f"{name}_mean"] = stack.mean(axis=0)
        out[f"{name}_std"] = stack.std(axis=0)
    return out


def export_aggregate(traces, path) -> Path:
    return write_table(path, aggregate(traces), AGG_COLUMNS)
