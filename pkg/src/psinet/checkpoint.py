"""Binary parameter container.

Layout, all little-endian: magic "PSNF", u16 version, u32 tensor count,
then per tensor (sorted by name): u16 name length, utf-8 name, u8 dtype
code (0 = float32), u8 rank, u32 per dimension, raw float32 payload.
Only float32 tensors are accepted; loading reproduces saved bytes
exactly, so a save/load cycle is bitwise lossless.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"PSNF"
VERSION = 1
DTYPE_F32 = 0


def serialized_size(params: dict[str, np.ndarray]) -> int:
    """Byte length of the container holding `params`; also used as the
    payload size for federation traffic accounting."""
    total = 4 + 2 + 4
    for name, arr in params.items():
        total += 2 + len(name.encode()) + 1 + 1 + 4 * arr.ndim + 4 * arr.size
    return total


def dump_params(params: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HI", VERSION, len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        if arr.dtype != np.float32:
            raise FormatError(
                f"{name}: container stores float32 only, got {arr.dtype}"
            )
        enc = name.encode()
        if len(enc) > 0xFFFF:
            raise FormatError(f"parameter name too long ({len(enc)} bytes)")
        out += struct.pack("<H", len(enc))
        out += enc
        out += struct.pack("<BB", DTYPE_F32, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4", copy=False).tobytes()
    return bytes(out)


def save_params(path: str, params: dict[str, np.ndarray]) -> None:
    blob = dump_params(params)
    with open(path, "wb") as fh:
        fh.write(blob)


def _need(blob: bytes, offset: int, count: int, what: str) -> int:
    if offset + count > len(blob):
        raise FormatError(
            f"truncated container: needed {count} bytes for {what} at byte {offset}, "
            f"file ends at {len(blob)}"
        )
    return offset + count


def parse_params(blob: bytes) -> dict[str, np.ndarray]:
    off = _need(blob, 0, 4, "magic")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at byte 0, expected {MAGIC!r}")
    end = _need(blob, off, 6, "header")
    version, count = struct.unpack_from("<HI", blob, off)
    off = end
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        end = _need(blob, off, 2, f"name length of tensor {i}")
        (name_len,) = struct.unpack_from("<H", blob, off)
        off = end
        end = _need(blob, off, name_len, f"name of tensor {i}")
        name = blob[off:end].decode()
        off = end
        end = _need(blob, off, 2, f"dtype/rank of {name!r}")
        dtype_code, rank = struct.unpack_from("<BB", blob, off)
        off = end
        if dtype_code != DTYPE_F32:
            raise FormatError(f"{name!r}: unknown dtype code {dtype_code} at byte {off - 2}")
        end = _need(blob, off, 4 * rank, f"shape of {name!r}")
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off = end
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        end = _need(blob, off, 4 * size, f"data of {name!r}")
        if name in params:
            raise FormatError(f"duplicate tensor name {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        params[name] = arr.astype(np.float32, copy=True)
        off = end
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after tensor {count - 1}")
    return params


def load_params(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_params(fh.read())
