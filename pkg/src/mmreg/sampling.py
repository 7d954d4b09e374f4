"""Trilinear interpolation, dense pull-back warping and interpolant derivatives.

Out-of-grid coordinates are clamped per axis to ``[0, n - 1]`` (edge
replication). The derivative along a clamped axis is zero. At an exact cell
face the derivative of the lower cell is used.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .core import DisplacementField, Volume
from .errors import ShapeError, ValidationError


@njit(cache=True)
def _axis_cell(p, n):
    """Lower node, fraction and in-range flag along one axis (clamp, ties to lower cell)."""
    inside = 1.0 if 0.0 <= p <= n - 1 else 0.0
    if n == 1:
        return 0, 0, 0.0, 0.0
    pc = min(max(p, 0.0), n - 1.0)
    i0 = min(max(int(np.ceil(pc)) - 1, 0), n - 2)
    return i0, i0 + 1, pc - i0, inside


@njit(cache=True)
def _trilinear(data, px, py, pz, values, grads, with_grad):
    C, nz, ny, nx = data.shape
    for m in range(px.shape[0]):
        x0, x1, fx, inx = _axis_cell(px[m], nx)
        y0, y1, fy, iny = _axis_cell(py[m], ny)
        z0, z1, fz, inz = _axis_cell(pz[m], nz)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        for c in range(C):
            v000 = data[c, z0, y0, x0]
            v100 = data[c, z0, y0, x1]
            v010 = data[c, z0, y1, x0]
            v110 = data[c, z0, y1, x1]
            v001 = data[c, z1, y0, x0]
            v101 = data[c, z1, y0, x1]
            v011 = data[c, z1, y1, x0]
            v111 = data[c, z1, y1, x1]
            # weighted form (not v0 + f*(v1 - v0)) so grid nodes are reproduced exactly
            c00 = gx * v000 + fx * v100
            c10 = gx * v010 + fx * v110
            c01 = gx * v001 + fx * v101
            c11 = gx * v011 + fx * v111
            c0 = gy * c00 + fy * c10
            c1 = gy * c01 + fy * c11
            values[c, m] = gz * c0 + fz * c1
            if with_grad:
                grads[0, c, m] = (gy * gz * (v100 - v000) + fy * gz * (v110 - v010)
                                  + gy * fz * (v101 - v001) + fy * fz * (v111 - v011)) * inx
                grads[1, c, m] = (gz * (c10 - c00) + fz * (c11 - c01)) * iny
                grads[2, c, m] = (c1 - c0) * inz


def interpolate(data: np.ndarray, px, py, pz, gradient: bool = False):
    """Trilinear interpolation of every channel of ``data`` at many points.

    Parameters
    ----------
    data : (C, nz, ny, nx) array
    px, py, pz : arrays of identical shape S holding continuous voxel coordinates
    gradient : also return the partial derivatives with respect to the point

    Returns
    -------
    values : (C, *S) float64 array
    grads : (3, C, *S) float64 array, only if ``gradient`` is set; order x, y, z
    """
    px, py, pz = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (px, py, pz)))
    shape = px.shape
    data = np.ascontiguousarray(data, dtype=np.float64)
    C = data.shape[0]
    m = px.size
    values = np.empty((C, m))
    grads = np.empty((3, C, m) if gradient else (3, C, 0))
    _trilinear(data, np.ascontiguousarray(px).reshape(-1), np.ascontiguousarray(py).reshape(-1),
               np.ascontiguousarray(pz).reshape(-1), values, grads, gradient)
    values = values.reshape((C,) + shape)
    if not gradient:
        return values
    return values, grads.reshape((3, C) + shape)


def _point(p):
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValidationError(f"sample point must be three finite coordinates, got {p!r}")
    return p


def _channel(v: Volume, c: int) -> np.ndarray:
    if not 0 <= c < v.channels:
        raise ValidationError(f"channel {c} out of range for a {v.channels}-channel volume")
    return v.data[c:c + 1]


def sample(v: Volume, p, c: int = 0) -> float:
    """Trilinearly interpolated intensity of channel ``c`` at point ``p = (x, y, z)``."""
    p = _point(p)
    return float(interpolate(_channel(v, c), p[0], p[1], p[2])[0])


def sample_gradient(v: Volume, p, c: int = 0) -> tuple[float, float, float]:
    """Exact partial derivatives of the trilinear interpolant at ``p``."""
    p = _point(p)
    _, g = interpolate(_channel(v, c), p[0], p[1], p[2], gradient=True)
    return tuple(float(g[i, 0]) for i in range(3))


def grid_coordinates(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxel coordinate arrays of shape ``(nz, ny, nx)`` in x, y, z order."""
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz, dtype=np.float64), np.arange(ny, dtype=np.float64),
                          np.arange(nx, dtype=np.float64), indexing="ij")
    return x, y, z


def warp_array(data: np.ndarray, disp: np.ndarray, gradient: bool = False):
    """Pull-back warp of raw arrays: ``out[c, p] = data[c](p + disp[:, p])``."""
    x, y, z = grid_coordinates((data.shape[3], data.shape[2], data.shape[1]))
    return interpolate(data, x + disp[0], y + disp[1], z + disp[2], gradient=gradient)


def warp(v: Volume, u: DisplacementField) -> Volume:
    """Resample ``v`` at ``p + u(p)`` for every voxel ``p`` of the field's grid."""
    if v.dims != u.dims:
        raise ShapeError(f"volume dims {v.dims} do not match field dims {u.dims}")
    return Volume(warp_array(v.data, u.data), v.spacing)


def warp_points(u: DisplacementField, points) -> np.ndarray:
    """Map an ``(n, 3)`` array of points through ``p -> p + u(p)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValidationError("points must be finite")
    disp = interpolate(u.data, pts[:, 0], pts[:, 1], pts[:, 2])
    return pts + disp.T


def warp_point(u: DisplacementField, p) -> tuple[float, float, float]:
    p = _point(p)
    return tuple(float(c) for c in warp_points(u, p[np.newaxis])[0])
