"""Binary checkpoint archive.

Layout (all integers little-endian):

    magic   4 bytes  b"MEDT"
    version u32      currently 1
    count   u32      number of tensors
    then per tensor:
        name_len u16, name UTF-8 bytes
        rank     u8,  extents rank * u32
        payload  float32 little-endian, C order
    crc32   u32      over every byte between the 12-byte header and the crc

Tensors are written in the order of the mapping passed in, so a load
followed by a save reproduces the file byte for byte.
"""

import struct
import zlib

import numpy as np

from .errors import InputError

MAGIC = b"MEDT"
VERSION = 1


def save_archive(path, tensors):
    """Write `tensors` (name -> array-like, cast to float32) to `path`."""
    body = bytearray()
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise InputError(f"tensor name too long: {name[:40]}...")
        if data.ndim > 0xFF:
            raise InputError(f"tensor rank {data.ndim} exceeds format limit")
        body += struct.pack("<H", len(name_b))
        body += name_b
        body += struct.pack("<B", data.ndim)
        body += struct.pack(f"<{data.ndim}I", *data.shape)
        body += data.tobytes()
    blob = MAGIC + struct.pack("<II", VERSION, len(tensors)) + bytes(body)
    blob += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_archive(path):
    """Read an archive; returns an ordered dict name -> float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint archive (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported archive version {version}")
    body = blob[12:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise InputError(f"{path}: checksum mismatch, archive corrupted")
    out = {}
    off = 0
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
        except (struct.error, ValueError) as exc:
            raise InputError(f"{path}: truncated archive ({exc})") from exc
        out[name] = arr.copy()
    if off != len(body):
        raise InputError(f"{path}: {len(body) - off} trailing bytes after last tensor")
    return out
