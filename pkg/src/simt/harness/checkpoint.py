"""Binary checkpoints.

Layout (little endian)::

    b"SIMTCKPT"  u32 version  u32 n_sections
    per section: u32 name_len, name (utf-8), u32 ndim, u64 * ndim shape, f64 * prod(shape)
    u32 crc32 of everything before it
"""

from __future__ import annotations

import os
import struct
import zlib
from collections import OrderedDict
from typing import Mapping

import numpy as np

from ..autodiff import ParamSet

MAGIC = b"SIMTCKPT"
VERSION = 1


class CheckpointError(OSError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def encode(sections: Mapping[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(sections))]
    for name, arr in sections.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            raise TypeError(f"section {name!r} must be float64, got {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < len(MAGIC) + 12 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, count = struct.unpack_from("<II", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptError("checksum mismatch")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = len(MAGIC) + 8
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{ndim}Q", body, pos + 4)
            pos += 4 + 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(body, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = data.astype(np.float64).reshape(shape)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointCorruptError(f"malformed section table: {e}") from None
    if pos != len(body):
        raise CheckpointCorruptError("trailing bytes after the last section")
    return out


def save(path: str | os.PathLike, sections: Mapping[str, np.ndarray]) -> None:
    """Write atomically: a partial file never replaces a good one."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode(sections))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        return decode(f.read())


# ---------------------------------------------------------------------------
# helpers for packing structured state into sections


def put_params(sections: dict, prefix: str, params: ParamSet | None) -> None:
    if params is None:
        return
    for k, v in params.items():
        sections[f"{prefix}/{k}"] = np.asarray(v, dtype=np.float64)


def get_params(sections: Mapping[str, np.ndarray], prefix: str) -> ParamSet | None:
    tag = prefix + "/"
    items = [(k[len(tag):], v.copy()) for k, v in sections.items() if k.startswith(tag)]
    return ParamSet(items) if items else None


_MASK64 = (1 << 64) - 1


def rng_to_array(rng: np.random.Generator) -> np.ndarray:
    """PCG64 state as six uint64 words reinterpreted as float64 (bit-exact)."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported bit generator {st['bit_generator']}")
    s, inc = st["state"]["state"], st["state"]["inc"]
    words = np.array([s >> 64, s & _MASK64, inc >> 64, inc & _MASK64,
                      st["has_uint32"], st["uinteger"]], dtype=np.uint64)
    return words.view(np.float64)


def rng_from_array(arr: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in np.asarray(arr, dtype=np.float64).view(np.uint64)]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
        "has_uint32": w[4], "uinteger": w[5],
    }
    return rng


def scalar(x: float) -> np.ndarray:
    return np.array(float(x))
