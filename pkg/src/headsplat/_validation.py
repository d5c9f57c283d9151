"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import ShapeMismatchError


def check_array(x, *, ndim=None, last_dim=None, dtype=np.float64, name="array", finite=True):
    """Convert ``x`` to a numpy array and check its rank / trailing size."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeMismatchError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if last_dim is not None and (arr.ndim == 0 or arr.shape[-1] != last_dim):
        raise ShapeMismatchError(f"{name}: expected trailing dimension {last_dim}, got {arr.shape}")
    if finite and arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_vector(x, length, name="vector"):
    """1-d tensor/array of an exact length, returned unchanged otherwise."""
    shape = tuple(x.shape) if hasattr(x, "shape") else (len(x),)
    if len(shape) != 1 or shape[0] != length:
        raise ShapeMismatchError(f"{name}: expected length {length}, got shape {shape}")
    return x


def check_same_shape(a, b, names=("a", "b")):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"{names[0]} shape {tuple(a.shape)} != {names[1]} shape {tuple(b.shape)}")


def check_faces(faces, n_vertices, name="faces"):
    faces = np.asarray(faces)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ShapeMismatchError(f"{name}: expected (F, 3), got {faces.shape}")
    if faces.size and (faces.min() < 0 or faces.max() >= n_vertices):
        raise ShapeMismatchError(f"{name}: index out of range for {n_vertices} vertices")
    return faces.astype(np.int64)


def as_tensor(x, dtype=None, like=None):
    """Tensor view of ``x``; dtype defaults to that of ``like`` or float64."""
    if dtype is None:
        dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)
