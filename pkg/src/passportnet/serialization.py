"""Self-describing binary container used for passports, checkpoints and watermark keys.

Layout:  magic(8) | header_len(u32 LE) | header JSON | float32 LE array payload | sha256(32).
The digest covers every byte before it, so any single-byte tampering is caught on load.
All arrays are stored as little-endian float32; anything non-float lives in the header meta.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError

MAGIC = b"PPNC0001"
FORMAT_VERSION = 1


@dataclass
class Container:
    kind: str
    meta: dict
    fingerprint: str | None
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def save_container(path, kind, arrays, meta=None, fingerprint=None):
    """Write named float32 arrays plus JSON metadata to `path`."""
    path = Path(path)
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "fingerprint": fingerprint,
        "meta": meta or {},
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + bytes(payload)
    digest = hashlib.sha256(blob).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(blob + digest)


def load_container(path, expected_kind=None):
    """Read a container, verifying magic, version, checksum and (optionally) kind."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ContainerFormatError(f"cannot read container {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 4 + 32:
        raise ContainerFormatError(f"{path}: file too short to be a container")
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic bytes")
    blob, digest = data[:-32], data[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise ContainerFormatError(f"{path}: checksum mismatch (file corrupt)")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    header_start = len(MAGIC) + 4
    header_end = header_start + header_len
    if header_end > len(blob):
        raise ContainerFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise ContainerFormatError(f"{path}: unsupported format version {header.get('version')}")
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise ContainerFormatError(
            f"{path}: expected a {expected_kind!r} container, found {header.get('kind')!r}"
        )
    payload = blob[header_end:]
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ContainerFormatError(f"{path}: array {entry['name']!r} overruns payload")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Container(
        kind=header["kind"],
        meta=header["meta"],
        fingerprint=header.get("fingerprint"),
        arrays=arrays,
    )
