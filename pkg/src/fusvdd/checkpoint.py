"""Model checkpoint container.

Layout (little-endian)::

    b"MAWT" | u32 version (=1) | u32 header length | header JSON
    then per tensor: u32 name length | name (utf-8) | u32 ndim | u32 dims[ndim] | float32 payload

The header JSON always lists the tensor names in file order under ``"tensors"``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import BadMagicError, FormatError, LengthMismatchError, TruncatedError, VersionMismatchError

WEIGHTS_MAGIC = b"MAWT"
WEIGHTS_VERSION = 1
_PRELUDE = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


def encode_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    header = dict(header, tensors=list(tensors))
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PRELUDE.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, len(hbytes)), hbytes]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        nb = name.encode("utf-8")
        parts.append(_U32.pack(len(nb)) + nb + _U32.pack(arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != WEIGHTS_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    if len(buf) < _PRELUDE.size:
        raise TruncatedError("checkpoint ends inside the fixed prelude")
    _, version, hlen = _PRELUDE.unpack_from(buf)
    if version != WEIGHTS_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    pos = _PRELUDE.size
    if len(buf) < pos + hlen:
        raise TruncatedError("checkpoint header is truncated")
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}") from None
    pos += hlen

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError("checkpoint tensor section is truncated")
        out = buf[pos : pos + n]
        pos += n
        return out

    tensors: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (nlen,) = _U32.unpack(take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = _U32.unpack(take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
    if list(tensors) != header.get("tensors"):
        raise LengthMismatchError("tensor section does not match the names listed in the header")
    return header, tensors


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(header, tensors))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
