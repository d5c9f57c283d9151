"""PNG codecs: 8-bit RGB and masks, 16-bit normals/pose maps.

Normals are stored as round((n * 0.5 + 0.5) * 65535) per channel.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np


def _write(path, data):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"could not write {path}")


def _read(path):
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise FileNotFoundError(f"could not read image {path}")
    return data


def encode_rgb8(rgb):
    return np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def encode_normal16(normal):
    n = np.clip(np.asarray(normal, dtype=np.float64), -1, 1)
    return np.round((n * 0.5 + 0.5) * 65535).astype(np.uint16)


def decode_normal16(data):
    return (data.astype(np.float64) / 65535.0 - 0.5) * 2.0


def write_rgb(path, rgb):
    _write(path, encode_rgb8(rgb)[..., ::-1])


def read_rgb(path):
    return _read(path)[..., ::-1].astype(np.float64) / 255.0


def write_mask(path, mask):
    _write(path, encode_rgb8(mask))


def read_mask(path):
    return _read(path).astype(np.float64) / 255.0


def write_normal(path, normal):
    _write(path, encode_normal16(normal)[..., ::-1])


def read_normal(path):
    return decode_normal16(_read(path)[..., ::-1])


def resize_map(image, height, width):
    """Area/bilinear resize for conditioning maps (latent-resolution interpolation)."""
    interp = cv2.INTER_AREA if height < image.shape[0] else cv2.INTER_LINEAR
    return cv2.resize(np.asarray(image, dtype=np.float32), (width, height), interpolation=interp)
