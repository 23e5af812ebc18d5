"""
Serialization helpers for checkpoints and result tables.

This module provides:
1. The self-describing checkpoint container shared by all modules
   (text header lines, a blank line, raw little-endian float64 payload)
2. Delimiter-separated text tables (UTF-8, LF, 17 significant digits)
3. File digests used by run manifests

Container layout:

    name=<name>
    shape=<d0>,<d1>,...
    dtype=f64le
    time_seconds=<float>
    <key>=<value>          (optional extra lines)
    <blank line>
    <raw little-endian 8-byte floats, row-major>
"""

import csv
import hashlib
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from pynn4dvar.exceptions import DataError, SerializationError

DTYPE_TAG = "f64le"
_RESERVED = ("name", "shape", "dtype", "time_seconds")


@dataclass(frozen=True)
class Checkpoint:
    """A named array with its valid time and free-form header lines."""
    name: str
    data: np.ndarray
    time_seconds: float = 0.0
    extra: Mapping[str, str] = field(default_factory=dict)


def format_float(value: float) -> str:
    """Format a float with 17 significant digits ('.' separator, no locale)."""
    return format(float(value), ".17g")


def to_bytes(checkpoint: Checkpoint) -> bytes:
    """
    Serialize a checkpoint into the container format.

    Args:
        checkpoint: Array and metadata to serialize

    Returns:
        Header lines followed by the raw little-endian payload

    Raises:
        SerializationError: If an extra key collides with a reserved key
            or contains a newline or '='
    """
    data = np.asarray(checkpoint.data, dtype=np.float64)
    lines = [
        f"name={checkpoint.name}",
        "shape=" + ",".join(str(d) for d in data.shape),
        f"dtype={DTYPE_TAG}",
        f"time_seconds={format_float(checkpoint.time_seconds)}",
    ]
    for key, value in checkpoint.extra.items():
        if key in _RESERVED or "=" in key or "\n" in key or "\n" in str(value):
            raise SerializationError(f"Invalid extra header entry: {key!r}")
        lines.append(f"{key}={value}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    return header + data.astype("<f8").tobytes(order="C")


def from_bytes(blob: bytes, source: str | None = None) -> Checkpoint:
    """
    Parse the container format.

    Args:
        blob: Bytes produced by to_bytes()
        source: Optional file name used in error messages

    Returns:
        The decoded checkpoint

    Raises:
        SerializationError: If the header is malformed or the payload size
            does not match the declared shape
    """
    split = blob.find(b"\n\n")
    if split < 0:
        raise SerializationError("Missing header terminator", source)
    try:
        header_text = blob[:split].decode("utf-8")
    except UnicodeDecodeError as e:
        raise SerializationError(f"Header is not UTF-8: {e}", source)

    entries: dict[str, str] = {}
    for line in header_text.split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise SerializationError(f"Malformed header line: {line!r}", source)
        entries[key] = value

    for key in _RESERVED:
        if key not in entries:
            raise SerializationError(f"Missing header line '{key}'", source)
    if entries["dtype"] != DTYPE_TAG:
        raise SerializationError(f"Unsupported dtype {entries['dtype']!r}", source)

    try:
        shape = tuple(int(d) for d in entries["shape"].split(",")) if entries["shape"] else ()
        time_seconds = float(entries["time_seconds"])
    except ValueError as e:
        raise SerializationError(f"Bad header value: {e}", source)

    payload = blob[split + 2:]
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise SerializationError(
            f"Payload has {len(payload)} bytes, shape {shape} needs {expected}", source
        )
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    extra = {k: v for k, v in entries.items() if k not in _RESERVED}
    return Checkpoint(entries["name"], data, time_seconds, extra)


def atomic_write(path: str | Path, blob: bytes) -> Path:
    """Write bytes to a temporary sibling file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    return path


def write_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    return atomic_write(path, to_bytes(checkpoint))


def read_checkpoint(path: str | Path) -> Checkpoint:
    """
    Read a checkpoint file.

    Raises:
        DataError: If the file does not exist
        SerializationError: If the file is not a valid container
    """
    path = Path(path)
    if not path.exists():
        raise DataError("Checkpoint not found", str(path))
    return from_bytes(path.read_bytes(), source=str(path))


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def table_bytes(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    """Render a comma-separated table with LF line endings."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise SerializationError(f"Row has {len(row)} cells, header has {len(header)}")
        writer.writerow([_cell(v) for v in row])
    return buffer.getvalue().encode("utf-8")


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return atomic_write(path, table_bytes(header, rows))


def read_table(path: str | Path, expected_header: Sequence[str] | None = None) -> list[dict[str, str]]:
    """
    Read a comma-separated table into a list of row dictionaries.

    Raises:
        DataError: If the file does not exist
        SerializationError: If the header does not match `expected_header`
    """
    path = Path(path)
    if not path.exists():
        raise DataError("Table not found", str(path))
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if expected_header is not None and list(reader.fieldnames or []) != list(expected_header):
            raise SerializationError(
                f"Unexpected header {reader.fieldnames}, expected {list(expected_header)}",
                str(path),
            )
        return list(reader)


def file_digest(path: str | Path) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
