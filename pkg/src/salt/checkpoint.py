"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SALTCKPT"            8 bytes
    format version         u32
    config length          u32, followed by UTF-8 JSON (sorted keys)
    entry count            u32
    entries                name_len u16, name, dtype_len u8, dtype str,
                           ndim u8, shape u64 * ndim, offset u64, nbytes u64
    payload                concatenated raw arrays; offsets are relative to
                           the first payload byte

Saving the same tensors and config twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (BadMagicError, ConfigError, ShapeMismatchError, TruncatedError,
                     VersionMismatchError)

MAGIC = b"SALTCKPT"
FORMAT_VERSION = 1
_ALLOWED = {"<f4", "<f8", "<i8", "<i4", "|u1", "|b1"}


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr).reshape(arr.shape)  # ascontiguousarray promotes 0-d to 1-d
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def encode_checkpoint(tensors: Mapping[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    head = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    payload = []
    offset = 0
    for name in sorted(tensors):
        arr = _le(np.asarray(tensors[name]))
        dtype = arr.dtype.str
        if dtype not in _ALLOWED:
            raise ConfigError(f"{name}: dtype {dtype} not storable")
        nb = name.encode()
        ds = dtype.encode()
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(ds)) + ds)
        head.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        head.append(struct.pack("<QQ", offset, arr.nbytes))
        payload.append(arr.tobytes())
        offset += arr.nbytes
    return b"".join(head + payload)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(f"checkpoint ends at byte {len(self.blob)}, needed {self.pos + n}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(blob)
    magic = r.take(len(MAGIC)) if len(blob) >= len(MAGIC) else blob
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {magic[:8]!r})")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    (cfg_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(cfg_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedError(f"config block unreadable: {exc}") from exc
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (dlen,) = r.unpack("<B")
        dtype = r.take(dlen).decode()
        if dtype not in _ALLOWED:
            raise TruncatedError(f"{name}: unknown dtype {dtype!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        offset, nbytes = r.unpack("<QQ")
        entries.append((name, dtype, tuple(shape), offset, nbytes))
    base = r.pos
    tensors = {}
    for name, dtype, shape, offset, nbytes in entries:
        dt = np.dtype(dtype)
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != nbytes:
            raise ShapeMismatchError(f"{name}: {nbytes} bytes do not fit shape {shape} of {dtype}")
        start = base + offset
        if start + nbytes > len(blob):
            raise TruncatedError(f"{name}: payload runs past end of file")
        tensors[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=start).reshape(shape).astype(dt.newbyteorder("="))
    return config, tensors


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], config: dict) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, config))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike,
                    expected: Mapping[str, tuple[int, ...]] | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; with ``expected`` every named shape must be present and match."""
    config, tensors = decode_checkpoint(Path(path).read_bytes())
    if expected is not None:
        verify_shapes(tensors, expected)
    return config, tensors


def verify_shapes(tensors: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]) -> None:
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise ShapeMismatchError(f"{name}: stored {tensors[name].shape}, config expects {tuple(shape)}")


def flatten(groups: Mapping[str, Mapping]) -> dict[str, np.ndarray]:
    """{"encoder": ParamSet, ...} -> {"encoder.patch_embed.weight": array, ...}."""
    out = {}
    for group, params in groups.items():
        for name, t in params.items():
            out[f"{group}.{name}"] = t if isinstance(t, np.ndarray) else t.data
    return out


def unflatten(tensors: Mapping[str, np.ndarray]) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        group, _, name = key.partition(".")
        out.setdefault(group, {})[name] = arr
    return out
