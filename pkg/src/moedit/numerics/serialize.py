"""Binary tensor records and checkpoint bundles.

A record is: 8-byte magic, u32 rank, one u64 per dim, then the payload
as little-endian f32. A checkpoint directory holds `manifest.json`
(metadata, per-tensor offsets, SHA-256 of the blob) plus `tensors.bin`
with the records packed in manifest order. Tensors are written sorted
by name, so identical contents always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOETNSR1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
FORMAT_VERSION = 1


class SerializationError(ValueError):
    """Corrupt or mismatched on-disk tensor data."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")  # tobytes() below emits C order
    head = MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record; returns (array, offset just past it)."""
    if buf[offset : offset + 8] != MAGIC:
        raise SerializationError(f"bad tensor magic at offset {offset}")
    offset += 8
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}Q", buf, offset) if rank else ()
    offset += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    end = offset + 4 * count
    if end > len(buf):
        raise SerializationError("tensor record truncated")
    arr = np.frombuffer(buf[offset:end], dtype="<f4").reshape(dims)
    return arr.astype(np.float32), end


def save_bundle(path: Path | str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write manifest + packed blob; `meta` must be JSON-serializable."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    entries = {}
    for name in sorted(tensors):
        rec = tensor_to_bytes(tensors[name])
        entries[name] = {
            "offset": len(blob),
            "nbytes": len(rec),
            "shape": list(tensors[name].shape),
        }
        blob += rec
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "tensors": entries,
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    (path / BLOB_NAME).write_bytes(bytes(blob))
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bundle(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise SerializationError(f"no {MANIFEST_NAME} under {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SerializationError(
            f"unsupported format_version {manifest.get('format_version')}"
        )
    blob = (path / BLOB_NAME).read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise SerializationError(
            f"blob sha256 mismatch under {path}: manifest says "
            f"{manifest['blob_sha256']}, file hashes to {digest}"
        )
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr, end = tensor_from_bytes(blob, entry["offset"])
        if end - entry["offset"] != entry["nbytes"]:
            raise SerializationError(f"tensor {name}: recorded nbytes mismatch")
        if list(arr.shape) != entry["shape"]:
            raise SerializationError(f"tensor {name}: shape mismatch")
        tensors[name] = arr
    return manifest["meta"], tensors
