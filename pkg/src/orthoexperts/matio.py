"""Matrix file I/O: the BMAT1 binary format and RFC 4180 CSV.

BMAT1 layout: 5 ASCII magic bytes ``BMAT1``, then two little-endian uint32
(rows, cols), then rows*cols little-endian float64 values in row-major order.

CSV files are plain numeric rows (``.`` decimal separator, CRLF line endings
on write). Lines starting with ``#`` are treated as comments and skipped on
read.
"""

import csv
import struct
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .validation import as_matrix

_MAGIC = b"BMAT1"


def write_bmat(path, w):
    w = as_matrix(w, "w")
    rows, cols = w.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def _open_for_read(path, mode, **kwargs):
    try:
        return open(path, mode, **kwargs)
    except FileNotFoundError:
        raise ValidationError(f"{path}: no such file") from None


def read_bmat(path):
    with _open_for_read(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise ValidationError(f"{path}: truncated header")
        rows, cols = struct.unpack("<II", header)
        payload = fh.read()
    expected = rows * cols * 8
    if len(payload) != expected:
        raise ValidationError(
            f"{path}: expected {expected} payload bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return as_matrix(data.reshape(rows, cols), str(path))


def write_csv_matrix(path, w, header_lines=()):
    """Write a numeric matrix as CSV, optionally preceded by '#' comment lines."""
    w = as_matrix(w, "w")
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\r\n")
        writer = csv.writer(fh)
        for row in w:
            writer.writerow([repr(float(v)) for v in row])


def read_csv_matrix(path):
    rows = []
    with _open_for_read(path, "r", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        for record in reader:
            if not record:
                continue
            try:
                rows.append([float(cell) for cell in record])
            except ValueError as exc:
                raise ValidationError(f"{path}: non-numeric cell ({exc})") from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValidationError(f"{path}: ragged rows")
    return as_matrix(np.asarray(rows), str(path))


def read_comment_header(path):
    """Return the leading '#' comment lines of a CSV file, stripped of '# '."""
    lines = []
    with open(path, "r", newline="") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            lines.append(line[1:].strip())
    return lines


def read_matrix(path):
    """Read a matrix from a ``.bmat`` or ``.csv`` file, by extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".bmat":
        return read_bmat(path)
    if suffix == ".csv":
        return read_csv_matrix(path)
    raise ValidationError(f"{path}: unsupported matrix extension {suffix!r}")


def write_matrix(path, w):
    """Write a matrix to a ``.bmat`` or ``.csv`` file, by extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".bmat":
        write_bmat(path, w)
    elif suffix == ".csv":
        write_csv_matrix(path, w)
    else:
        raise ValidationError(f"{path}: unsupported matrix extension {suffix!r}")
