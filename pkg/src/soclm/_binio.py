"""Magic-prefixed container: JSON header block followed by named tensors.

Layout after the magic: u32 header length, UTF-8 JSON header, u32 tensor
count, then per tensor: u16 name length, name, 2-byte dtype code, u8 ndim,
u32 dims, little-endian data.
"""
import json
import struct

import numpy as np

_CODES = {"f4": "<f4", "f8": "<f8", "u1": "|u1", "u2": "<u2", "i8": "<i8"}


def _code(arr: np.ndarray) -> str:
    kind = arr.dtype.kind + str(arr.dtype.itemsize)
    if kind not in _CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return kind


def dump(path, magic: bytes, header: dict, tensors: dict, cast: str | None = None) -> None:
    """Write ``tensors`` (name -> array); ``cast`` forces a dtype code for float arrays."""
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if cast and arr.dtype.kind == "f":
                arr = arr.astype(_CODES[cast])
            code = _code(arr)
            arr = np.ascontiguousarray(arr, dtype=_CODES[code])
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(code.encode("ascii"))
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load(path, magic: bytes) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(magic):
        raise ValueError(f"{path}: bad magic, expected {magic!r}")
    off = len(magic)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        code = data[off:off + 2].decode("ascii")
        off += 2
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = np.dtype(_CODES[code])
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype=dt, count=size, offset=off).reshape(shape).copy()
        off += size * dt.itemsize
    return header, tensors
