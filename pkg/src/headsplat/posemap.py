"""Head-pose conditioning maps: camera-space vertex normals of the expression-free mesh."""

from __future__ import annotations

import numpy as np
import torch

from .head_model import pose_vertices, vertex_normals


def rasterize_vertex_attributes(vertices, faces, attributes, camera):
    """Z-buffered triangle rasterization with perspective-correct interpolation.

    Returns (image (H, W, C), coverage mask). Faces with a vertex in front of the near
    plane are skipped; depth ties keep the lower face index.
    """
    v = np.asarray(vertices, dtype=np.float64)
    attr = np.asarray(attributes, dtype=np.float64)
    H, W = camera.height, camera.width
    p = v @ camera.rotation.T + camera.translation
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = camera.fx * p[:, 0] / z + camera.cx
        sy = camera.fy * p[:, 1] / z + camera.cy
    zbuf = np.full((H, W), np.inf)
    out = np.zeros((H, W, attr.shape[1]))
    for fi, (i0, i1, i2) in enumerate(np.asarray(faces)):
        zz = z[[i0, i1, i2]]
        if np.any(zz <= camera.near):
            continue
        xs = sx[[i0, i1, i2]]
        ys = sy[[i0, i1, i2]]
        c0 = max(int(np.ceil(xs.min() - 0.5)), 0)
        c1 = min(int(np.floor(xs.max() - 0.5)), W - 1)
        r0 = max(int(np.ceil(ys.min() - 0.5)), 0)
        r1 = min(int(np.floor(ys.max() - 0.5)), H - 1)
        if c1 < c0 or r1 < r0:
            continue
        det = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(det) < 1e-14:
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1 + 1) + 0.5, np.arange(r0, r1 + 1) + 0.5)
        w1 = ((cols - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (rows - ys[0])) / det
        w2 = ((xs[1] - xs[0]) * (rows - ys[0]) - (cols - xs[0]) * (ys[1] - ys[0])) / det
        w0 = 1.0 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        # perspective-correct weights
        q0, q1, q2 = w0 / zz[0], w1 / zz[1], w2 / zz[2]
        inv_z = q0 + q1 + q2
        depth = 1.0 / inv_z
        rr = rows[inside].astype(int)
        cc = cols[inside].astype(int)
        d = depth[inside]
        closer = d < zbuf[rr, cc]
        if not closer.any():
            continue
        rr, cc, d = rr[closer], cc[closer], d[closer]
        ww = np.stack([q0[inside][closer], q1[inside][closer], q2[inside][closer]], -1) * d[:, None]
        zbuf[rr, cc] = d
        out[rr, cc] = ww @ attr[[i0, i1, i2]]
    return out, np.isfinite(zbuf)


def render_pose_map(model, params, frame, camera):
    """Pose map for one frame: expression forced to zero, jaw/neck/global pose kept.

    Normals are rotated into camera space; background pixels are (0, 0, 0).
    """
    vals = params.frame_values(frame)
    vals["expression"] = torch.zeros_like(vals["expression"])
    with torch.no_grad():
        verts = pose_vertices(model, **vals).double().numpy()
    normals = vertex_normals(verts, model.faces) @ camera.rotation.T
    image, _ = rasterize_vertex_attributes(verts, model.faces, normals, camera)
    return image
