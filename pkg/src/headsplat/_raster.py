"""Tile-based alpha compositing kernels (numba) and their autograd wrapper.

Inputs are already projected: 2D means, conics (inverse 2D covariance as a, b, c),
opacities and per-Gaussian feature vectors. The footprint of a Gaussian is

    g(d2) = max(0, (exp(-d2 / 2) - exp(-9 / 2)) / (1 - exp(-9 / 2)))

i.e. a Gaussian lowered so it reaches zero exactly on its 3-sigma ellipse. This keeps
the footprint continuous where tiles stop listing the Gaussian.
"""

from __future__ import annotations

import math

import numba
import numpy as np
import torch

TILE = 16
T_MIN = 1e-4
CUTOFF_D2 = 9.0
_E_CUT = math.exp(-0.5 * CUTOFF_D2)
_NORM = 1.0 / (1.0 - _E_CUT)


@numba.njit(cache=True)
def _bin(means, cov_xx, cov_yy, order, width, height, tile):
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    n_tiles = n_tx * n_ty
    lo_x = np.empty(order.shape[0], np.int64)
    hi_x = np.empty(order.shape[0], np.int64)
    lo_y = np.empty(order.shape[0], np.int64)
    hi_y = np.empty(order.shape[0], np.int64)
    counts = np.zeros(n_tiles + 1, np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        rx = 3.0 * math.sqrt(cov_xx[g])
        ry = 3.0 * math.sqrt(cov_yy[g])
        # pixel centres at index + 0.5
        jx0 = max(int(math.ceil(means[g, 0] - rx - 0.5)), 0)
        jx1 = min(int(math.floor(means[g, 0] + rx - 0.5)), width - 1)
        jy0 = max(int(math.ceil(means[g, 1] - ry - 0.5)), 0)
        jy1 = min(int(math.floor(means[g, 1] + ry - 0.5)), height - 1)
        if jx1 < jx0 or jy1 < jy0:
            lo_x[k] = 1
            hi_x[k] = 0
            lo_y[k] = 1
            hi_y[k] = 0
            continue
        lo_x[k] = jx0 // tile
        hi_x[k] = jx1 // tile
        lo_y[k] = jy0 // tile
        hi_y[k] = jy1 // tile
        for ty in range(lo_y[k], hi_y[k] + 1):
            for tx in range(lo_x[k], hi_x[k] + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], np.int64)
    for k in range(order.shape[0]):
        for ty in range(lo_y[k], hi_y[k] + 1):
            for tx in range(lo_x[k], hi_x[k] + 1):
                t = ty * n_tx + tx
                ids[fill[t]] = order[k]
                fill[t] += 1
    return offsets, ids


@numba.njit(cache=True)
def _forward(means, conics, opacity, feats, bg, offsets, ids, width, height, tile, t_min, e_cut, norm):
    C = feats.shape[1]
    n_tx = (width + tile - 1) // tile
    out = np.empty((height, width, C), feats.dtype)
    trans = np.empty((height, width), feats.dtype)
    n_contrib = np.zeros((height, width), np.int64)
    acc = np.empty(C, np.float64)
    for py in range(height):
        for px in range(width):
            t = (py // tile) * n_tx + px // tile
            cx = px + 0.5
            cy = py + 0.5
            T = 1.0
            for c in range(C):
                acc[c] = 0.0
            last = 0
            for k in range(offsets[t], offsets[t + 1]):
                if T < t_min:
                    break
                last = k - offsets[t] + 1
                g = ids[k]
                dx = cx - means[g, 0]
                dy = cy - means[g, 1]
                d2 = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                if d2 >= 9.0:
                    continue
                w = (math.exp(-0.5 * d2) - e_cut) * norm
                if w <= 0.0:
                    continue
                a = opacity[g] * w
                for c in range(C):
                    acc[c] += feats[g, c] * a * T
                T *= 1.0 - a
            for c in range(C):
                out[py, px, c] = acc[c] + T * bg[c]
            trans[py, px] = T
            n_contrib[py, px] = last
    return out, trans, n_contrib


@numba.njit(cache=True)
def _backward(
    means, conics, opacity, feats, bg, offsets, ids, n_contrib, grad_out, grad_alpha,
    width, height, tile, e_cut, norm,
):
    N = means.shape[0]
    C = feats.shape[1]
    n_tx = (width + tile - 1) // tile
    g_means = np.zeros((N, 2), np.float64)
    g_conics = np.zeros((N, 3), np.float64)
    g_opac = np.zeros(N, np.float64)
    g_feats = np.zeros((N, C), np.float64)
    max_len = 0
    for t in range(offsets.shape[0] - 1):
        max_len = max(max_len, offsets[t + 1] - offsets[t])
    alphas = np.empty(max_len, np.float64)
    Ts = np.empty(max_len, np.float64)
    rest = np.empty(C, np.float64)
    for py in range(height):
        for px in range(width):
            t = (py // tile) * n_tx + px // tile
            m = n_contrib[py, px]
            if m == 0:
                continue
            cx = px + 0.5
            cy = py + 0.5
            T = 1.0
            for j in range(m):
                g = ids[offsets[t] + j]
                dx = cx - means[g, 0]
                dy = cy - means[g, 1]
                d2 = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                a = 0.0
                if d2 < 9.0:
                    w = (math.exp(-0.5 * d2) - e_cut) * norm
                    if w > 0.0:
                        a = opacity[g] * w
                alphas[j] = a
                Ts[j] = T
                T *= 1.0 - a
            for c in range(C):
                rest[c] = bg[c]
            rest_a = 0.0
            ga = grad_alpha[py, px]
            for j in range(m - 1, -1, -1):
                a = alphas[j]
                if a == 0.0:
                    continue
                g = ids[offsets[t] + j]
                Tj = Ts[j]
                dl_da = ga * (1.0 - rest_a)
                for c in range(C):
                    go = grad_out[py, px, c]
                    g_feats[g, c] += a * Tj * go
                    dl_da += go * (feats[g, c] - rest[c])
                    rest[c] = feats[g, c] * a + (1.0 - a) * rest[c]
                rest_a = a + (1.0 - a) * rest_a
                dl_da *= Tj
                dx = cx - means[g, 0]
                dy = cy - means[g, 1]
                d2 = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                e = math.exp(-0.5 * d2)
                w = (e - e_cut) * norm
                g_opac[g] += dl_da * w
                dl_dd2 = dl_da * opacity[g] * (-0.5 * e * norm)
                g_conics[g, 0] += dl_dd2 * dx * dx
                g_conics[g, 1] += dl_dd2 * 2.0 * dx * dy
                g_conics[g, 2] += dl_dd2 * dy * dy
                # d(d2)/d(mean) = -d(d2)/d(dx)
                g_means[g, 0] -= dl_dd2 * (2.0 * conics[g, 0] * dx + 2.0 * conics[g, 1] * dy)
                g_means[g, 1] -= dl_dd2 * (2.0 * conics[g, 1] * dx + 2.0 * conics[g, 2] * dy)
    return g_means, g_conics, g_opac, g_feats


def bin_gaussians(means, cov_xx, cov_yy, order, width, height, tile=TILE):
    """CSR tile lists: ``ids[offsets[t]:offsets[t + 1]]`` are the Gaussians of tile t."""
    return _bin(
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(cov_xx, dtype=np.float64),
        np.ascontiguousarray(cov_yy, dtype=np.float64),
        np.ascontiguousarray(order, dtype=np.int64),
        int(width), int(height), int(tile),
    )


def _np(t):
    return np.ascontiguousarray(t.detach().cpu().numpy())


class RasterizeGaussians(torch.autograd.Function):
    """(means2d, conics, opacity, features, background) -> (image, transmittance)."""

    @staticmethod
    def forward(ctx, means, conics, opacity, feats, bg, cov_diag, order, width, height):
        m, co, op, fe = _np(means), _np(conics), _np(opacity), _np(feats)
        b = _np(bg).astype(fe.dtype)
        offsets, ids = bin_gaussians(m, _np(cov_diag[:, 0]), _np(cov_diag[:, 1]), _np(order), width, height)
        out, trans, n_contrib = _forward(m, co, op, fe, b, offsets, ids, width, height, TILE, T_MIN, _E_CUT, _NORM)
        ctx.state = (m, co, op, fe, b, offsets, ids, n_contrib, width, height)
        ctx.dtype = feats.dtype
        return torch.from_numpy(out), torch.from_numpy(trans)

    @staticmethod
    def backward(ctx, grad_out, grad_trans):
        m, co, op, fe, b, offsets, ids, n_contrib, width, height = ctx.state
        if grad_out is None:
            grad_out = torch.zeros(height, width, fe.shape[1], dtype=ctx.dtype)
        if grad_trans is None:
            grad_trans = torch.zeros(height, width, dtype=ctx.dtype)
        # d trans = -d alpha
        g_m, g_c, g_o, g_f = _backward(
            m, co, op, fe, b, offsets, ids, n_contrib,
            np.ascontiguousarray(grad_out.detach().numpy(), dtype=np.float64),
            np.ascontiguousarray(-grad_trans.detach().numpy(), dtype=np.float64),
            width, height, TILE, _E_CUT, _NORM,
        )
        conv = lambda a: torch.from_numpy(a).to(ctx.dtype)  # noqa: E731
        return conv(g_m), conv(g_c), conv(g_o), conv(g_f), None, None, None, None, None


def rasterize(means, conics, opacity, feats, bg, cov_diag, order, width, height):
    return RasterizeGaussians.apply(means, conics, opacity, feats, bg, cov_diag, order, int(width), int(height))
