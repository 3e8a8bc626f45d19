"""CSV readers and writers for the three data schemas.

missing : ``x1,...,xd,m,y`` with ``y`` empty when ``m = 0``
median  : ``x1,...,xd,y``
shift   : ``w1,...,wd,a,y``
"""

from __future__ import annotations

import csv
import math
import re

import numpy as np

from .exceptions import DataValidationError
from .median_reg import XYDataset
from .missing_mean import MissingDataset
from .shift_effect import ShiftDataset


class CsvSchemaError(DataValidationError):
    """Malformed CSV input; carries the 1-based line and column of the problem."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line, self.column = line, column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


def _prefix_columns(header, prefix, trailing, path):
    if len(header) < len(trailing) + 1:
        raise CsvSchemaError(f"{path}: expected columns {prefix}1..{prefix}d,{','.join(trailing)}", 1)
    body, tail = header[: -len(trailing)], header[-len(trailing) :]
    for j, name in enumerate(body, start=1):
        if name != f"{prefix}{j}":
            raise CsvSchemaError(f"expected header '{prefix}{j}', found '{name}'", 1, j)
    for j, (got, want) in enumerate(zip(tail, trailing), start=len(body) + 1):
        if got != want:
            raise CsvSchemaError(f"expected header '{want}', found '{got}'", 1, j)
    return len(body)


def _parse_float(text, line, col, allow_empty=False):
    text = text.strip()
    if text == "":
        if allow_empty:
            return math.nan
        raise CsvSchemaError("empty value", line, col)
    if not re.fullmatch(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?", text):
        raise CsvSchemaError(f"not a number: {text!r}", line, col)
    return float(text)


def _read_rows(path, prefix, trailing, empty_ok=()):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise CsvSchemaError(f"cannot open {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvSchemaError("file is empty; a header row is required", 1) from None
        except UnicodeDecodeError as exc:
            raise CsvSchemaError("file is not valid UTF-8", 1) from exc
        d = _prefix_columns(header, prefix, trailing, path)
        width = len(header)
        rows = []
        try:
            for line_no, raw in enumerate(reader, start=2):
                if not raw or all(not c.strip() for c in raw):
                    continue
                if len(raw) != width:
                    raise CsvSchemaError(f"expected {width} fields, found {len(raw)}", line_no)
                rows.append(
                    [
                        _parse_float(c, line_no, j, allow_empty=(header[j - 1] in empty_ok))
                        for j, c in enumerate(raw, start=1)
                    ]
                )
        except UnicodeDecodeError as exc:
            raise CsvSchemaError("file is not valid UTF-8") from exc
    if not rows:
        raise CsvSchemaError("no data rows", 2)
    return d, np.array(rows, dtype=float)


def read_missing_csv(path) -> MissingDataset:
    d, arr = _read_rows(path, "x", ("m", "y"), empty_ok=("y",))
    m, y = arr[:, d], arr[:, d + 1]
    for i, (mi, yi) in enumerate(zip(m, y), start=2):
        if mi not in (0.0, 1.0):
            raise CsvSchemaError("m must be 0 or 1", i, d + 1)
        if mi == 1 and (math.isnan(yi) or yi not in (0.0, 1.0)):
            raise CsvSchemaError("observed y must be 0 or 1", i, d + 2)
        if mi == 0 and not math.isnan(yi):
            raise CsvSchemaError("y must be empty when m = 0", i, d + 2)
    return MissingDataset(arr[:, :d], m.astype(np.int8), y)


def read_median_csv(path) -> XYDataset:
    d, arr = _read_rows(path, "x", ("y",))
    return XYDataset(arr[:, :d], arr[:, d])


def read_shift_csv(path, gamma: float, a_min=None, a_max=None) -> ShiftDataset:
    d, arr = _read_rows(path, "w", ("a", "y"))
    y = arr[:, d + 1]
    bad = np.flatnonzero(~np.isin(y, (0.0, 1.0)))
    if bad.size:
        raise CsvSchemaError("y must be 0 or 1", int(bad[0]) + 2, d + 2)
    return ShiftDataset(arr[:, :d], arr[:, d], y, gamma, a_min, a_max)


def _fmt(v: float, as_int: bool = False) -> str:
    if math.isnan(v):
        return ""
    return str(int(v)) if as_int else repr(float(v))


def _write(path, header, columns, n_binary: int = 0):
    """The last ``n_binary`` columns are 0/1 indicators and are written as integers."""
    flags = [j >= len(columns) - n_binary for j in range(len(columns))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in zip(*columns):
            wr.writerow([_fmt(v, f) for v, f in zip(row, flags)])


def write_missing_csv(path, data: MissingDataset) -> None:
    d = data.x.shape[1]
    header = [f"x{j}" for j in range(1, d + 1)] + ["m", "y"]
    _write(path, header, [*data.x.T, data.m.astype(float), data.y], n_binary=2)


def write_median_csv(path, data: XYDataset) -> None:
    d = data.x.shape[1]
    _write(path, [f"x{j}" for j in range(1, d + 1)] + ["y"], [*data.x.T, data.y])


def write_shift_csv(path, data: ShiftDataset) -> None:
    d = data.w.shape[1]
    _write(path, [f"w{j}" for j in range(1, d + 1)] + ["a", "y"], [*data.w.T, data.a, data.y], n_binary=1)


def write_curves_csv(path, curves: dict) -> None:
    names = list(curves)
    _write(path, names, [curves[k] for k in names])
