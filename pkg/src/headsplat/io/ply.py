"""Binary PLY export of world-space Gaussians in the common splat-viewer layout."""

from __future__ import annotations

import numpy as np
import torch

from ..gaussians import promote_to_world
from ..geometry import matrix_to_quaternion

SH_C0 = 0.28209479177387814
PROPERTIES = (
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2",
)


def gaussian_records(cloud, vertices, faces, residuals=None):
    """(N, 14) float array in :data:`PROPERTIES` order for the active Gaussians."""
    with torch.no_grad():
        world = promote_to_world(cloud, vertices, faces, residuals=residuals)
        active = world.active.numpy()
        pos = world.position.double().numpy()[active]
        scale = np.log(world.scale.double().numpy()[active])
        rot = matrix_to_quaternion(world.rotation.double().numpy()[active])
        opacity = world.opacity.double().numpy()[active]
        color = world.color.double().numpy()[active]
    opacity = np.clip(opacity, 1e-7, 1 - 1e-7)
    logit = np.log(opacity / (1 - opacity))
    f_dc = (color - 0.5) / SH_C0
    return np.concatenate([pos, logit[:, None], scale, rot, f_dc], axis=1)


def write_ply(path, records, properties=PROPERTIES):
    records = np.ascontiguousarray(records, dtype="<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {records.shape[0]}"]
    header += [f"property float {p}" for p in properties]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(records.tobytes())


def export_ply(path, cloud, vertices, faces, residuals=None):
    """Write the cloud promoted onto ``vertices`` as a splat PLY; returns the count."""
    records = gaussian_records(cloud, vertices, faces, residuals)
    write_ply(path, records)
    return records.shape[0]


def read_ply(path):
    """Parse a binary little-endian float-only vertex PLY -> (property names, records)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ValueError("not a binary little-endian PLY")
    count = 0
    props = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise ValueError(f"unsupported property type {parts[1]}")
            props.append(parts[2])
    records = np.frombuffer(data[end:], dtype="<f4", count=count * len(props)).reshape(count, len(props))
    return props, records.copy()
