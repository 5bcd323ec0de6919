"""Binary tensor snapshots.

Each tensor is written as a header (name, rows, cols) followed by rows*cols
little-endian float64 values in row-major order.  A file starts with the
magic ``TWIN`` and a tensor count.  Parameter checkpoints pair such a file
with a JSON manifest carrying the tensor shapes and a version number.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .features import EmbeddingTable

MAGIC = b"TWIN"


class SnapshotError(ValueError):
    pass


def write_tensors(path, tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    tensors = list(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr, dtype="<f8")
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.ndim != 2:
                raise SnapshotError(f"{name}: only 1-D/2-D tensors are supported")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes(order="C"))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise SnapshotError(f"{path}: bad magic")
    (count,) = struct.unpack_from("<I", data, 4)
    pos, out = 8, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise SnapshotError(f"{path}: truncated tensor {name}")
        out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += nbytes
    return out


def save_tables(path, tables: Mapping[str, EmbeddingTable]) -> None:
    """Embedding snapshot: each table stored as its d_A x v_A matrix."""
    write_tensors(path, [(name, t.matrix) for name, t in tables.items()])


def load_tables(path) -> dict[str, EmbeddingTable]:
    return {name: EmbeddingTable(name, np.ascontiguousarray(m.T))
            for name, m in read_tensors(path).items()}


def save_checkpoint(directory, tensors: Mapping[str, np.ndarray], version: int,
                    extra: Mapping | None = None) -> Path:
    """Write ``params.bin`` + ``manifest.json``; versions must increase."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if int(old["version"]) >= version:
            raise SnapshotError(f"version {version} does not exceed stored {old['version']}")
    write_tensors(directory / "params.bin", tensors.items())
    manifest = {
        "version": int(version),
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()],
    }
    if extra:
        manifest["extra"] = dict(extra)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], int]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    raw = read_tensors(directory / "params.bin")
    out = {}
    for entry in manifest["tensors"]:
        arr = raw[entry["name"]]
        out[entry["name"]] = arr.reshape(entry["shape"])
    return out, int(manifest["version"])
