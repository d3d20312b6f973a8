"""Binary artifact formats and deterministic CSV output.

All binary files are little-endian: a short ASCII magic, ``u32`` shape
metadata, then ``f64`` payload blocks.  Matrices are stored column-major and
tensors in their column-major vectorization, so writer/reader round-trips are
bit-exact.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

TENSOR_MAGIC = b"DTEN1"


def write_magic(f, magic):
    f.write(magic)


def expect_magic(f, magic, path):
    got = f.read(len(magic))
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")


def write_u32(f, values):
    f.write(struct.pack(f"<{len(values)}I", *[int(v) for v in values]))


def read_u32(f, n):
    raw = f.read(4 * n)
    if len(raw) != 4 * n:
        raise ValueError("truncated header")
    return list(struct.unpack(f"<{n}I", raw))


def write_f64(f, array):
    """Write an array as little-endian f64 in column-major order."""
    np.asarray(array, dtype="<f8").reshape(-1, order="F").tofile(f)


def read_f64(f, shape):
    """Read ``prod(shape)`` little-endian f64 values into ``shape`` (column-major)."""
    count = int(np.prod(shape, initial=1))
    flat = np.fromfile(f, dtype="<f8", count=count)
    if flat.size != count:
        raise ValueError("truncated payload")
    return flat.astype(float).reshape(shape, order="F")


def save_tensor(path, tensor):
    """Write a dense tensor to a ``.dten`` file."""
    tensor = np.asarray(tensor, dtype=float)
    with open(path, "wb") as f:
        write_magic(f, TENSOR_MAGIC)
        write_u32(f, [tensor.ndim])
        write_u32(f, tensor.shape)
        write_f64(f, tensor)


def load_tensor(path):
    """Read a dense tensor from a ``.dten`` file."""
    with open(path, "rb") as f:
        expect_magic(f, TENSOR_MAGIC, path)
        (order,) = read_u32(f, 1)
        dims = read_u32(f, order)
        return read_f64(f, tuple(dims))


def format_float(x):
    """Shortest decimal string that round-trips a float64."""
    return repr(float(x))


def write_csv(path, header, rows):
    """Write an RFC-4180 CSV (CRLF line endings, minimal quoting)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])


def read_csv(path):
    """Read a CSV written by :func:`write_csv`; returns (header, rows of str)."""
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]
