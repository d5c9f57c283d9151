"""Head models stored as GDHM containers, one chunk per model array."""

from __future__ import annotations

import logging

import numpy as np

from ..exceptions import GdhmFormatError
from ..head_model import HeadModel
from .gdhm import read_gdhm, write_gdhm

log = logging.getLogger(__name__)

_INT_FIELDS = {"faces", "uv_faces", "joint_parents"}


def model_chunks(model, prefix=""):
    return {
        prefix + name: (arr.astype(np.int32) if name in _INT_FIELDS else arr.astype(np.float32))
        for name, arr in model.arrays().items()
    }


def model_from_chunks(chunks, prefix=""):
    names = list(HeadModel.__dataclass_fields__)
    names = [n for n in names if HeadModel.__dataclass_fields__[n].init]
    missing = [n for n in names if prefix + n not in chunks]
    if missing:
        raise GdhmFormatError(f"model file lacks chunk(s): {missing}")
    known = {prefix + n for n in names}
    for extra in chunks:
        if extra.startswith(prefix) and extra not in known:
            log.warning("skipping unknown model chunk %r", extra)
    kwargs = {
        n: chunks[prefix + n].astype(np.int64 if n in _INT_FIELDS else np.float64) for n in names
    }
    return HeadModel(**kwargs).validate()


def save_model(model, path):
    write_gdhm(path, model_chunks(model))


def load_model(path):
    """Read and validate a head model file."""
    return model_from_chunks(read_gdhm(path))
