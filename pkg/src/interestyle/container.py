"""Versioned binary container for named numpy arrays.

Layout (all integers little-endian):

    bytes 0..7    magic  b"ISTYARC1"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..15  uint32 length of the JSON index
    ...           JSON index: {"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    ...           raw C-order array payloads, back to back, little-endian
    last 32 bytes SHA-256 over everything before it

Used for checkpoints, ground-truth latents and edit directions. A container
round-trips byte-identically: save(load(save(x))) produces the same file.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from .util import atomic_write_bytes

MAGIC = b"ISTYARC1"
VERSION = 1
_DIGEST_SIZE = 32


class ContainerError(ValueError):
    """Malformed, corrupted or inconsistent container file."""


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_arrays(path, arrays: dict) -> Path:
    """Write a name -> ndarray mapping to `path`. Names must be unique (dict guarantees it)."""
    index = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        if not isinstance(name, str) or not name:
            raise ContainerError(f"array name must be a non-empty string, got {name!r}")
        arr = _little_endian(np.asarray(arr))
        raw = arr.tobytes()
        index.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": index}, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += VERSION.to_bytes(4, "little")
    blob += len(header).to_bytes(4, "little")
    blob += header
    for raw in payloads:
        blob += raw
    blob += hashlib.sha256(bytes(blob)).digest()
    return atomic_write_bytes(path, bytes(blob))


def load_arrays(path) -> dict:
    """Read a container back into an ordered name -> ndarray dict, verifying the checksum."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 + _DIGEST_SIZE:
        raise ContainerError(f"{path}: file too short to be a container")
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic bytes")
    version = int.from_bytes(data[8:12], "little")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch (corrupted file)")
    header_len = int.from_bytes(data[12:16], "little")
    header_end = 16 + header_len
    try:
        index = json.loads(data[16:header_end].decode("utf-8"))["arrays"]
    except (ValueError, KeyError) as exc:
        raise ContainerError(f"{path}: malformed index: {exc}") from exc
    out = {}
    for entry in index:
        name = entry["name"]
        if name in out:
            raise ContainerError(f"{path}: duplicate array name {name!r}")
        start = header_end + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(body):
            raise ContainerError(f"{path}: array {name!r} extends past end of file")
        arr = np.frombuffer(body[start:stop], dtype=np.dtype(entry["dtype"]))
        out[name] = arr.reshape(entry["shape"]).copy()
    return out
