"""Checkpoints: GDHM containers with an embedded JSON config and its hash.

Tensor chunks are stored as float32/int32, so a model trained in float32 round-trips
bit-exactly. The config travels as a UTF-8 ``uint8`` chunk named ``__config__`` and
its sha256 as ``__config_hash__``.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from ..exceptions import GdhmFormatError
from .gdhm import read_gdhm, write_gdhm

CONFIG_CHUNK = "__config__"
HASH_CHUNK = "__config_hash__"


def config_hash(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def _bytes_chunk(text):
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def save_checkpoint(path, arrays, config):
    """Write ``arrays`` (name -> ndarray) plus ``config`` (JSON-serializable)."""
    text = json.dumps(config, sort_keys=True)
    chunks = {CONFIG_CHUNK: _bytes_chunk(text), HASH_CHUNK: _bytes_chunk(config_hash(config))}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(np.float32)
        elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
            arr = arr.astype(np.int32)
        chunks[name] = arr
    write_gdhm(path, chunks)


def load_checkpoint(path):
    """Return ``(arrays, config)``; raises if the stored hash does not match."""
    chunks = read_gdhm(path)
    if CONFIG_CHUNK not in chunks or HASH_CHUNK not in chunks:
        raise GdhmFormatError(f"{path}: not a checkpoint (config chunk missing)")
    config = json.loads(chunks.pop(CONFIG_CHUNK).tobytes().decode("utf-8"))
    stored = chunks.pop(HASH_CHUNK).tobytes().decode("ascii")
    if stored != config_hash(config):
        raise GdhmFormatError(f"{path}: config hash mismatch")
    return chunks, config
