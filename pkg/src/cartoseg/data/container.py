"""Byte-exact named-tensor file format used for weights and checkpoints.

Layout:

    magic "CSTC0001" (8 bytes)
    header length (uint64, little-endian)
    header JSON (utf-8): {"tensors": {name: {dtype, shape, offset, nbytes}},
                          "meta": {...}}
    payload: concatenated raw little-endian buffers

Offsets are relative to the payload start. The header is fully validated
(dtype known, sizes consistent, offsets in bounds and non-overlapping)
before any payload is interpreted; round-trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ContainerFormatError

MAGIC = b"CSTC0001"

_DTYPES = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "i4": np.dtype("<i4"),
    "i8": np.dtype("<i8"),
    "u1": np.dtype("u1"),
    "b1": np.dtype("?"),
}
_DTYPE_TOKENS = {np.dtype(d).newbyteorder("="): token for token, d in _DTYPES.items()}


def _token_for(arr: np.ndarray, name: str) -> str:
    key = arr.dtype.newbyteorder("=")
    if key not in _DTYPE_TOKENS:
        raise ContainerFormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    return _DTYPE_TOKENS[key]


def save_container(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named tensors (and optional JSON metadata) to one file."""
    path = Path(path)
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")
        token = _token_for(arr, name)
        raw = arr.astype(_DTYPES[token], copy=False).tobytes()
        entries[name] = {
            "dtype": token,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    return path


def _validate_entry(name: str, entry: dict, payload_len: int) -> tuple[int, int]:
    try:
        token, shape = entry["dtype"], entry["shape"]
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerFormatError(f"tensor {name!r} has a malformed header entry") from exc
    if token not in _DTYPES:
        raise ContainerFormatError(f"tensor {name!r} has unknown dtype token {token!r}")
    expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[token].itemsize
    if nbytes != expected:
        raise ContainerFormatError(
            f"tensor {name!r} declares {nbytes} bytes but shape {shape} needs {expected}"
        )
    if offset < 0 or offset + nbytes > payload_len:
        raise ContainerFormatError(
            f"tensor {name!r} payload [{offset}, {offset + nbytes}) is out of bounds "
            f"(payload is {payload_len} bytes)"
        )
    return offset, nbytes


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns (tensors, meta). Fully validates the header first."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError(f"{path} is not a tensor container (bad magic)")
    header_len = int.from_bytes(blob[len(MAGIC): len(MAGIC) + 8], "little")
    header_start = len(MAGIC) + 8
    if header_start + header_len > len(blob):
        raise ContainerFormatError(f"{path}: header is truncated")
    try:
        header = json.loads(blob[header_start: header_start + header_len].decode("utf-8"))
        entries = header["tensors"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise ContainerFormatError(f"{path}: header is not valid JSON") from exc

    payload = blob[header_start + header_len:]
    spans = []
    for name, entry in entries.items():
        offset, nbytes = _validate_entry(name, entry, len(payload))
        spans.append((offset, offset + nbytes, name))
    spans.sort()
    for (_, prev_end, prev_name), (start, _, name) in zip(spans, spans[1:]):
        if start < prev_end:
            raise ContainerFormatError(
                f"tensor {name!r} overlaps tensor {prev_name!r} in the payload"
            )

    tensors = {}
    for name, entry in entries.items():
        dtype = _DTYPES[entry["dtype"]]
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        flat = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        tensors[name] = flat.reshape(entry["shape"]).astype(dtype.newbyteorder("="), copy=True)
    return tensors, header.get("meta", {})
