"""Similarity metrics, diffusion regularizer and the combined bidirectional loss.

The combined objective is::

    L = sum_n (w_n * Sim_n(warp(X, u_fwd), Y) + w_n * Sim_n(warp(Y, u_bwd), X))
        + lam * (Diff(u_fwd) + Diff(u_bwd)) / 2

with ``Sim`` either MSE or ``1 - mean(local cc^2)``. Gradients are analytic:
metric derivatives with respect to warped intensities are chained through the
trilinear interpolant derivatives of the moving image. Everything is computed
in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import MSE, NCC, DisplacementField, LossSpec, Volume
from .errors import ShapeError, ValidationError
from .sampling import warp_array


# -- metrics on raw (C, nz, ny, nx) arrays -------------------------------------------

@njit(cache=True)
def _box_sum3(a, radius):
    """Clipped running window sums along x, then y, then z of a (K, nz, ny, nx) array."""
    K, nz, ny, nx = a.shape
    bx = np.empty_like(a)
    for k in range(K):
        for z in range(nz):
            for y in range(ny):
                acc = 0.0
                for j in range(min(radius, nx - 1) + 1):
                    acc += a[k, z, y, j]
                for x in range(nx):
                    bx[k, z, y, x] = acc
                    if x + radius + 1 < nx:
                        acc += a[k, z, y, x + radius + 1]
                    if x - radius >= 0:
                        acc -= a[k, z, y, x - radius]
    by = np.empty_like(a)
    row = np.empty(nx)
    for k in range(K):
        for z in range(nz):
            row[:] = 0.0
            for j in range(min(radius, ny - 1) + 1):
                row += bx[k, z, j]
            for y in range(ny):
                by[k, z, y] = row
                if y + radius + 1 < ny:
                    row += bx[k, z, y + radius + 1]
                if y - radius >= 0:
                    row -= bx[k, z, y - radius]
    out = np.empty_like(a)
    plane = np.empty((ny, nx))
    for k in range(K):
        plane[:] = 0.0
        for j in range(min(radius, nz - 1) + 1):
            plane += by[k, j]
        for z in range(nz):
            out[k, z] = plane
            if z + radius + 1 < nz:
                plane += by[k, z + radius + 1]
            if z - radius >= 0:
                plane -= by[k, z - radius]
    return out


def box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the cube of half-width ``radius`` around each voxel, clipped to the grid.

    Works on the last three axes of ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    shape = a.shape
    return _box_sum3(np.ascontiguousarray(a).reshape((-1,) + shape[-3:]), radius).reshape(shape)


def _window_counts(shape, radius: int) -> np.ndarray:
    nz, ny, nx = shape[-3:]
    counts = [np.minimum(np.arange(n) + radius, n - 1) - np.maximum(np.arange(n) - radius, 0) + 1
              for n in (nz, ny, nx)]
    return (counts[0][:, None, None] * counts[1][None, :, None] * counts[2][None, None, :]).astype(
        np.float64)


def mse_value_grad(w: np.ndarray, t: np.ndarray, gradient: bool = True):
    diff = w - t
    value = float(np.mean(diff * diff))
    if not gradient:
        return value, None
    return value, diff * (2.0 / diff.size)


def lncc_value_grad(w: np.ndarray, t: np.ndarray, window: int, eps: float, gradient: bool = True):
    """Local NCC loss ``1 - mean(cc^2)`` and its derivative with respect to ``w``."""
    r = window // 2
    n = _window_counts(w.shape, r)
    sw = box_sum(w, r)
    st = box_sum(t, r)
    wbar = sw / n
    tbar = st / n
    cross = box_sum(w * t, r) - sw * tbar
    var_w = np.maximum(box_sum(w * w, r) - sw * wbar, 0.0)
    var_t = np.maximum(box_sum(t * t, r) - st * tbar, 0.0)
    denom = var_w * var_t + eps
    cc2 = cross * cross / denom
    value = 1.0 - float(np.mean(cc2))
    if not gradient:
        return value, None
    alpha = 2.0 * cross / denom
    beta = alpha * cross * var_t / denom
    g = (t * box_sum(alpha, r) - box_sum(alpha * tbar, r)
         - w * box_sum(beta, r) + box_sum(beta * wbar, r))
    return value, g * (-1.0 / cc2.size)


def diffusion_value_grad(u: np.ndarray, gradient: bool = True):
    """Mean squared forward difference of every component along every axis."""
    u = np.asarray(u, dtype=np.float64)
    total = 0.0
    count = 0
    diffs = []
    for axis in (1, 2, 3):
        d = np.diff(u, axis=axis)
        diffs.append(d)
        total += float(np.sum(d * d))
        count += d.size
    if count == 0:
        return 0.0, (np.zeros_like(u) if gradient else None)
    value = total / count
    if not gradient:
        return value, None
    g = np.zeros_like(u)
    for axis, d in zip((1, 2, 3), diffs):
        s = 2.0 * d / count
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        g[tuple(hi)] += s
        g[tuple(lo)] -= s
    return value, g


def _metric(kind: str, w, t, spec: LossSpec, gradient: bool):
    if kind == MSE:
        return mse_value_grad(w, t, gradient)
    if kind == NCC:
        return lncc_value_grad(w, t, spec.ncc_window, spec.ncc_epsilon, gradient)
    raise ValidationError(f"unknown metric {kind!r}")


# -- public scalar metrics -----------------------------------------------------------

def _pair(a: Volume, b: Volume):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return a.data.astype(np.float64), b.data.astype(np.float64)


def mse(a: Volume, b: Volume) -> float:
    """Mean over voxels and channels of the squared intensity difference."""
    return mse_value_grad(*_pair(a, b), gradient=False)[0]


def lncc(a: Volume, b: Volume, window: int = 9, eps: float = 1e-5) -> float:
    """One minus the mean local squared correlation coefficient, in [0, 1].

    Windows are cubes of side ``window`` clipped to the grid; channels are
    weighted equally.
    """
    if isinstance(window, bool) or int(window) != window or window < 3 or window % 2 == 0:
        raise ValidationError(f"window must be an odd integer >= 3, got {window}")
    return lncc_value_grad(*_pair(a, b), int(window), float(eps), gradient=False)[0]


def diffusion(u: DisplacementField) -> float:
    return diffusion_value_grad(u.data, gradient=False)[0]


# -- combined objective --------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    forward: dict
    backward: dict
    reg: float
    total: float

    def to_dict(self) -> dict:
        return {"forward": dict(self.forward), "backward": dict(self.backward),
                "reg": self.reg, "total": self.total}


@dataclass(frozen=True)
class LossGradients:
    grad_forward: DisplacementField
    grad_backward: DisplacementField


def objective(x: np.ndarray, y: np.ndarray, u_fwd: np.ndarray, u_bwd: np.ndarray,
              spec: LossSpec, gradient: bool = True):
    """Array-level combined loss.

    Returns ``(breakdown, grad_fwd, grad_bwd)``; the gradients are ``None``
    when ``gradient`` is false.
    """
    fwd, bwd = {}, {}
    grads = []
    for moving, target, u, parts in ((x, y, u_fwd, fwd), (y, x, u_bwd, bwd)):
        if gradient:
            warped, dwarp = warp_array(moving, u, gradient=True)
            dsim = np.zeros_like(warped)
        else:
            warped = warp_array(moving, u)
        for kind, weight in spec.metrics:
            value, g = _metric(kind, warped, target, spec, gradient)
            parts[kind] = value
            if gradient and weight != 0:
                dsim += weight * g
        if gradient:
            grads.append(np.einsum("ic...,c...->i...", dwarp, dsim))

    reg_f, greg_f = diffusion_value_grad(u_fwd, gradient)
    reg_b, greg_b = diffusion_value_grad(u_bwd, gradient)
    reg = (reg_f + reg_b) / 2.0

    total = 0.0
    for kind, weight in spec.metrics:
        total += weight * fwd[kind] + weight * bwd[kind]
    total += spec.lam * reg
    breakdown = LossBreakdown(fwd, bwd, reg, total)
    if not gradient:
        return breakdown, None, None
    half = 0.5 * spec.lam
    return breakdown, grads[0] + half * greg_f, grads[1] + half * greg_b


def _check_inputs(X: Volume, Y: Volume, u_fwd: DisplacementField, u_bwd: DisplacementField,
                  spec: LossSpec) -> None:
    if X.data.shape != Y.data.shape:
        raise ShapeError(f"X {X.data.shape} and Y {Y.data.shape} differ in shape")
    if u_fwd.dims != X.dims or u_bwd.dims != X.dims:
        raise ShapeError(f"field dims {u_fwd.dims}/{u_bwd.dims} do not match volume dims {X.dims}")
    if not spec.metrics:
        raise ValidationError("loss needs at least one metric")


def combined_loss(X: Volume, Y: Volume, u_fwd: DisplacementField, u_bwd: DisplacementField,
                  spec: LossSpec) -> LossBreakdown:
    _check_inputs(X, Y, u_fwd, u_bwd, spec)
    return objective(X.data, Y.data, u_fwd.data, u_bwd.data, spec, gradient=False)[0]


def combined_loss_grad(X: Volume, Y: Volume, u_fwd: DisplacementField, u_bwd: DisplacementField,
                       spec: LossSpec) -> tuple[LossBreakdown, LossGradients]:
    _check_inputs(X, Y, u_fwd, u_bwd, spec)
    b, gf, gb = objective(X.data, Y.data, u_fwd.data, u_bwd.data, spec, gradient=True)
    return b, LossGradients(DisplacementField(gf), DisplacementField(gb))
