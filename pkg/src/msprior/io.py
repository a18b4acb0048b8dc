"""File formats: numeric CSVs, count tables, JSON artifacts and run manifests.

Floats are written with ``%.17g`` so every numeric artifact round-trips
exactly. Count-table CSVs carry one 1-based category-index column per
variable plus a ``count`` column; cells may appear in any order and missing
cells are zero.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from importlib.resources import files
from pathlib import Path

import numpy as np

from .ctab import CountTable, TableShape
from .dpmm import Dataset
from .errors import ConfigError, ParameterError

FLOAT_FMT = "%.17g"


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return FLOAT_FMT % x
    return str(x)


def write_csv(path, header, rows):
    """Write rows (iterables of numbers or strings) under a header line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def read_csv(path):
    """Header and rows of strings."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParameterError(f"{path} is empty")
    return rows[0], rows[1:]


def write_matrix(path, header, x):
    write_csv(path, header, np.atleast_2d(np.asarray(x, dtype=float)))


def read_matrix(path):
    header, rows = read_csv(path)
    try:
        x = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise ParameterError(f"{path}: non-numeric entry ({exc})") from None
    return header, x


def load_dataset(path):
    """Observation matrix from a CSV with a header row and numeric columns."""
    header, x = read_matrix(path)
    return Dataset(x, header)


def load_old_faithful():
    """The bundled 272 x 2 eruption/waiting-time data."""
    return load_dataset(files("msprior") / "data" / "old_faithful.csv")


def load_count_table(path, shape=None):
    """Read a count table; the shape is inferred from the largest indices when omitted."""
    header, rows = read_csv(path)
    if len(header) < 3 or header[-1] != "count":
        raise ParameterError(f"{path}: expected category columns followed by a 'count' column")
    try:
        idx = np.array([[int(v) for v in r[:-1]] for r in rows], dtype=np.int64).reshape(len(rows), len(header) - 1)
        cnt = np.array([float(r[-1]) for r in rows])
    except ValueError as exc:
        raise ParameterError(f"{path}: malformed entry ({exc})") from None
    if np.any(idx < 1):
        raise ParameterError(f"{path}: category indices are 1-based")
    if np.any(cnt < 0) or np.any(cnt != np.round(cnt)):
        raise ParameterError(f"{path}: counts must be nonnegative integers")
    if shape is None:
        shape = TableShape(idx.max(axis=0))
    elif not isinstance(shape, TableShape):
        shape = TableShape(shape)
    if idx.shape[1] != shape.p or np.any(idx > np.array(shape.d)):
        raise ParameterError(f"{path}: indices do not fit table shape {shape.d}")
    flat = np.ravel_multi_index(tuple((idx - 1).T), shape.d) if len(idx) else np.zeros(0, dtype=np.int64)
    counts = np.zeros(shape.size, dtype=np.int64)
    np.add.at(counts, flat, cnt.astype(np.int64))
    return CountTable(counts), shape


def write_table(path, shape, values, column="probability"):
    """All cells in lexicographic order (last variable fastest)."""
    values = np.asarray(values).ravel()
    header = [f"v{j + 1}" for j in range(shape.p)] + [column]
    rows = (list(shape.levels[c] + 1) + [values[c]] for c in range(shape.size))
    write_csv(path, header, rows)


def load_table(path, shape=None, column="probability"):
    """Inverse of :func:`write_table` for real-valued cell tables."""
    header, x = read_matrix(path)
    if header[-1] != column:
        raise ParameterError(f"{path}: last column must be {column!r}")
    idx = x[:, :-1].astype(np.int64)
    if shape is None:
        shape = TableShape(idx.max(axis=0))
    out = np.zeros(shape.size)
    out[np.ravel_multi_index(tuple((idx - 1).T), shape.d)] = x[:, -1]
    return out, shape


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def atomic_write_json(path, obj):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    os.close(fd)
    try:
        write_json(tmp, obj)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of a config dict."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()
