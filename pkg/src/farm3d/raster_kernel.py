"""Numba selection kernels for the soft rasterizer.

The differentiable renderer splits work into two passes: these kernels run
the O(pixels x faces) searches without gradients (which face covers each
pixel at least depth, which silhouette-contour segment is nearest), and the
torch side recomputes the few selected quantities differentiably.
"""

import numpy as np
from numba import njit, prange


@njit(inline="always")
def _seg_dist2(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    l2 = dx * dx + dy * dy
    if l2 < 1e-20:
        ex, ey = px - ax, py - ay
        return ex * ex + ey * ey
    t = ((px - ax) * dx + (py - ay) * dy) / l2
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    ex, ey = px - (ax + t * dx), py - (ay + t * dy)
    return ex * ex + ey * ey


@njit(parallel=True, cache=True)
def cover_faces(xy, zv, bbox, H, W, cov_face, cov_z):
    """Hard z-buffer: per pixel, the nearest face containing the pixel."""
    F = xy.shape[0]
    for i in prange(H):
        py = i + 0.5
        for f in range(F):
            if py < bbox[f, 2] or py > bbox[f, 3]:
                continue
            x0 = int(np.floor(bbox[f, 0] - 0.5))
            x1 = int(np.ceil(bbox[f, 1] - 0.5))
            if x0 < 0:
                x0 = 0
            if x1 > W - 1:
                x1 = W - 1
            ax, ay = xy[f, 0, 0], xy[f, 0, 1]
            bx, by = xy[f, 1, 0], xy[f, 1, 1]
            cx, cy = xy[f, 2, 0], xy[f, 2, 1]
            den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
            if den == 0.0:
                continue
            for j in range(x0, x1 + 1):
                px = j + 0.5
                w0 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / den
                if w0 < 0.0 or w0 > 1.0:
                    continue
                w1 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / den
                if w1 < 0.0 or w0 + w1 > 1.0:
                    continue
                w2 = 1.0 - w0 - w1
                z = w0 * zv[f, 0] + w1 * zv[f, 1] + w2 * zv[f, 2]
                if z < cov_z[i, j]:
                    cov_z[i, j] = z
                    cov_face[i, j] = f


@njit(parallel=True, cache=True)
def nearest_segment(segs, H, W, margin, seg_idx, seg_d2):
    """Per pixel, index of the nearest 2D segment within ``margin``."""
    E = segs.shape[0]
    for i in prange(H):
        py = i + 0.5
        for e in range(E):
            ax, ay = segs[e, 0, 0], segs[e, 0, 1]
            bx, by = segs[e, 1, 0], segs[e, 1, 1]
            ylo = min(ay, by) - margin
            yhi = max(ay, by) + margin
            if py < ylo or py > yhi:
                continue
            x0 = int(np.floor(min(ax, bx) - margin - 0.5))
            x1 = int(np.ceil(max(ax, bx) + margin - 0.5))
            if x0 < 0:
                x0 = 0
            if x1 > W - 1:
                x1 = W - 1
            for j in range(x0, x1 + 1):
                d2 = _seg_dist2(j + 0.5, py, ax, ay, bx, by)
                if d2 < seg_d2[i, j]:
                    seg_d2[i, j] = d2
                    seg_idx[i, j] = e


def run_cover(xy: np.ndarray, zv: np.ndarray, H: int, W: int):
    F = xy.shape[0]
    bbox = np.empty((F, 4), dtype=np.float32)
    bbox[:, 0] = xy[:, :, 0].min(axis=1)
    bbox[:, 1] = xy[:, :, 0].max(axis=1)
    bbox[:, 2] = xy[:, :, 1].min(axis=1)
    bbox[:, 3] = xy[:, :, 1].max(axis=1)
    cov_face = np.full((H, W), -1, dtype=np.int64)
    cov_z = np.full((H, W), np.float32(1e30), dtype=np.float32)
    cover_faces(xy.astype(np.float32), zv.astype(np.float32), bbox, H, W,
                cov_face, cov_z)
    return cov_face, cov_z


def run_nearest_segment(segs: np.ndarray, H: int, W: int, margin: float):
    seg_idx = np.full((H, W), -1, dtype=np.int64)
    seg_d2 = np.full((H, W), np.float32(1e30), dtype=np.float32)
    nearest_segment(segs.astype(np.float32), H, W, np.float32(margin),
                    seg_idx, seg_d2)
    return seg_idx
