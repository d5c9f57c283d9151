"""GDHM tensor container.

Layout (little-endian)::

    b"GDHM" | version u32 | n_chunks u32
    table of contents: n_chunks x (name_len u16, name utf-8)
    chunks, in table order: name_len u16, name, dtype u8, ndim u8, dims u32 x ndim, payload

dtype tags: 1 = float32, 2 = int32, 3 = uint8. The table of contents lets a reader name
the chunk that is missing from a truncated file.
"""

from __future__ import annotations

import struct

import numpy as np

from ..exceptions import GdhmFormatError

MAGIC = b"GDHM"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4"), 3: np.dtype("u1")}
_TAGS = {"f": 1, "i": 2, "u": 3, "b": 3}


def _tag_for(arr):
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return 3
    kind = arr.dtype.kind
    if kind not in _TAGS:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return _TAGS[kind]


def encode(chunks):
    """Serialize an ordered name -> array mapping."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(chunks))]
    names = []
    for name in chunks:
        raw = name.encode("utf-8")
        names.append(raw)
        parts.append(struct.pack("<H", len(raw)) + raw)
    for raw, arr in zip(names, chunks.values()):
        arr = np.asarray(arr)
        tag = _tag_for(arr)
        # ascontiguousarray would promote 0-d arrays to 1-d
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).reshape(arr.shape)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", tag, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise GdhmFormatError(f"truncated file: {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def decode(buf):
    """Parse bytes into an ordered name -> numpy array dict."""
    r = _Reader(memoryview(buf))
    if len(buf) < 12:
        raise GdhmFormatError("malformed header: file shorter than 12 bytes")
    if bytes(r.take(4, "magic")) != MAGIC:
        raise GdhmFormatError("malformed header: bad magic (expected b'GDHM')")
    version, n = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise GdhmFormatError(f"malformed header: unsupported version {version}")
    names = []
    for i in range(n):
        (length,) = struct.unpack("<H", r.take(2, f"table of contents entry {i}"))
        names.append(bytes(r.take(length, f"table of contents entry {i}")).decode("utf-8"))
    out = {}
    for name in names:
        if r.pos >= len(buf):
            raise GdhmFormatError(f"truncated file: chunk '{name}' is missing")
        what = f"chunk '{name}' is incomplete"
        (length,) = struct.unpack("<H", r.take(2, what))
        got = bytes(r.take(length, what)).decode("utf-8")
        if got != name:
            raise GdhmFormatError(f"chunk order mismatch: expected '{name}', found '{got}'")
        tag, ndim = struct.unpack("<BB", r.take(2, what))
        if tag not in _DTYPES:
            raise GdhmFormatError(f"chunk '{name}': unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, what))
        dt = _DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        payload = r.take(count * dt.itemsize, what)
        if name in out:
            raise GdhmFormatError(f"duplicate chunk '{name}'")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise GdhmFormatError(f"{len(buf) - r.pos} trailing bytes after last chunk")
    return out


def write_gdhm(path, chunks):
    with open(path, "wb") as fh:
        fh.write(encode(chunks))


def read_gdhm(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
