"""Binary tensor container.

Layout (all little-endian): magic ``DWGL``, format version u32, tensor count
u32, then per tensor: name length u16 + UTF-8 name, rank u8, extents as u32s,
raw float32 payload. Round-trips are bit-exact.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"DWGL"
VERSION = 1


def save_tensors(path, tensors):
    """Write ``tensors`` (ordered dict name -> float32 ndarray) to ``path``."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise FormatError("tensor name too long", name=name[:32] + "...")
        if arr.ndim > 0xFF:
            raise FormatError("tensor rank exceeds u8", rank=arr.ndim)
        chunks.append(struct.pack("<H", len(enc)))
        chunks.append(enc)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path):
    """Read a container written by :func:`save_tensors`; returns name -> ndarray."""
    with open(path, "rb") as fh:
        buf = fh.read()

    def need(offset, n, what):
        if offset + n > len(buf):
            raise FormatError(f"truncated container while reading {what}", offset=offset, path=str(path))
        return offset + n

    pos = need(0, 4, "magic")
    if buf[:4] != MAGIC:
        raise FormatError("bad magic bytes", offset=0, expected=MAGIC.decode(), path=str(path))
    end = need(pos, 8, "header")
    version, count = struct.unpack_from("<II", buf, pos)
    pos = end
    if version != VERSION:
        raise FormatError("unsupported format version", offset=4, version=version)

    out = {}
    for _ in range(count):
        end = need(pos, 2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos = end
        end = need(pos, nlen, "name")
        name = buf[pos:end].decode("utf-8")
        pos = end
        end = need(pos, 1, "rank")
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos = end
        end = need(pos, 4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos = end
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        end = need(pos, 4 * n, f"payload of {name!r}")
        arr = np.frombuffer(buf[pos:end], dtype="<f4").reshape(shape).copy()
        pos = end
        out[name] = arr
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", offset=pos, path=str(path))
    return out
