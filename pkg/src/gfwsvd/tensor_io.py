"""Binary tensor files, gradient-set directories, and experiment reports.

A ``.gft`` file is a 22-byte header followed by a row-major float64 payload::

    offset  size  field
    0       4     magic b"GFT1"
    4       1     dtype code (0 = little-endian float64)
    5       1     rank (always 2)
    6       8     rows, little-endian uint64
    14      8     cols, little-endian uint64
    22      8*r*c payload

Tensors are plain 2-D ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    NonFiniteError,
    TrailingDataError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    UnsupportedRankError,
    ValidationError,
)

MAGIC = b"GFT1"
DTYPE_F64 = 0
_HEADER = struct.Struct("<4sBBQQ")
HEADER_SIZE = _HEADER.size

MANIFEST_NAME = "manifest.json"

#: Column order of the compression report CSV.
REPORT_COLUMNS = (
    "method",
    "rank",
    "retention",
    "weighted_error",
    "exact_increase",
    "delta_loss",
    "accuracy",
)


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array and check that it is finite."""
    t = np.asarray(x, dtype=np.float64)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return t


def tensor_to_bytes(t) -> bytes:
    t = as_tensor(t)
    rows, cols = t.shape
    header = _HEADER.pack(MAGIC, DTYPE_F64, 2, rows, cols)
    return header + np.ascontiguousarray(t, dtype="<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if bytes(buf[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedPayloadError("header is truncated")
    _, dtype, rank, rows, cols = _HEADER.unpack_from(buf)
    if dtype != DTYPE_F64:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")
    if rank != 2:
        raise UnsupportedRankError(f"unsupported rank {rank}")
    expected = rows * cols * 8
    payload = len(buf) - HEADER_SIZE
    if payload < expected:
        raise TruncatedPayloadError(
            f"payload holds {payload} bytes, header requires {expected}"
        )
    if payload > expected:
        raise TrailingDataError(f"{payload - expected} trailing bytes after payload")
    t = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=HEADER_SIZE)
    t = t.astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(t)):
        raise NonFiniteError("payload contains non-finite entries")
    return t


def write_tensor(t, path) -> None:
    data = tensor_to_bytes(t)
    with open(path, "wb") as fh:
        fh.write(data)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


# -- gradient sets -----------------------------------------------------------


def write_gradient_set(grads: Sequence, directory) -> dict:
    """Write one ``.gft`` file per batch plus ``manifest.json``.

    Returns the manifest dictionary.
    """
    grads = [as_tensor(g, f"gradient {i}") for i, g in enumerate(grads)]
    if not grads:
        raise ValidationError("a gradient set needs at least one batch")
    n, m = grads[0].shape
    for i, g in enumerate(grads):
        if g.shape != (n, m):
            raise ValidationError(
                f"gradient {i} has shape {g.shape}, expected {(n, m)}"
            )
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(grads) - 1)))
    entries = []
    for i, g in enumerate(grads):
        name = f"batch_{i:0{width}d}.gft"
        write_tensor(g, directory / name)
        entries.append(name)
    manifest = {"n": n, "m": m, "count": len(grads), "entries": entries}
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def read_manifest(directory) -> dict:
    with open(Path(directory) / MANIFEST_NAME) as fh:
        manifest = json.load(fh)
    for key in ("n", "m", "count", "entries"):
        if key not in manifest:
            raise ValidationError(f"manifest is missing {key!r}")
    if manifest["count"] < 1 or manifest["count"] != len(manifest["entries"]):
        raise ValidationError("manifest count must be >= 1 and match entries")
    return manifest


def iter_gradient_set(directory) -> Iterator[np.ndarray]:
    """Stream the batches of a gradient set in manifest order."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    shape = (manifest["n"], manifest["m"])
    for name in manifest["entries"]:
        g = read_tensor(directory / name)
        if g.shape != shape:
            raise ValidationError(f"{name} has shape {g.shape}, expected {shape}")
        yield g


def read_gradient_set(directory) -> list[np.ndarray]:
    return list(iter_gradient_set(directory))


# -- reports -----------------------------------------------------------------


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, np.floating):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps_json(report) -> str:
    """Canonical JSON text: sorted keys, full float precision."""
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"


def records_to_csv(records: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for rec in records:
        writer.writerow([_csv_cell(rec.get(c)) for c in columns])
    return buf.getvalue()


def write_report(report, path, format: str | None = None, columns: Sequence[str] | None = None) -> None:
    """Persist a report as canonical JSON or as CSV.

    Parameters
    ----------
    report : mapping or list of mappings
        For CSV, either a list of records or a mapping with a ``"records"``
        list. JSON accepts any JSON-serialisable document.
    path : path-like
    format : {"json", "csv"}, optional
        Inferred from the file suffix when omitted.
    columns : sequence of str, optional
        CSV column order; defaults to :data:`REPORT_COLUMNS`.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "json":
        text = dumps_json(report)
    elif fmt == "csv":
        records = report["records"] if isinstance(report, Mapping) else report
        text = records_to_csv(records, tuple(columns or REPORT_COLUMNS))
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_report(path):
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    with open(path) as fh:
        return json.load(fh)
