"""Adam instance optimization of both fields, wrapped in a coarse-to-fine pyramid."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import DisplacementField, LossSpec, OptimConfig, Volume, check_dims, zero_field
from .errors import OptimizationError, ShapeError, ValidationError
from .loss import objective
from .sampling import interpolate

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError(f"adam shapes differ: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    if not lr >= 0:
        raise ValidationError(f"learning rate must be >= 0, got {lr}")
    t = state.t + 1
    if not np.all(np.isfinite(grads)):
        raise OptimizationError("non-finite gradient", iteration=t)
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


@dataclass
class RegistrationResult:
    u_fwd: DisplacementField
    u_bwd: DisplacementField
    loss_trace: list = field(default_factory=list)  # one list of totals per level
    best_loss: float = math.inf
    elapsed: float = 0.0
    level_dims: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "loss_trace": [list(level) for level in self.loss_trace],
            "level_dims": [list(d) for d in self.level_dims],
            "best_loss": self.best_loss,
            "elapsed_seconds": self.elapsed,
        }


def _optimize_arrays(x, y, init_fwd, init_bwd, spec: LossSpec, cfg: OptimConfig, level=None):
    params = np.stack([np.asarray(init_fwd, dtype=np.float64),
                       np.asarray(init_bwd, dtype=np.float64)])
    state = AdamState.zeros_like(params)
    trace = []
    best = (math.inf, params)
    for it in range(cfg.iterations + 1):
        last = it == cfg.iterations
        # divergence is detected below, so overflow warnings are noise
        with np.errstate(over="ignore", invalid="ignore"):
            breakdown, gf, gb = objective(x, y, params[0], params[1], spec, gradient=not last)
        total = breakdown.total
        if not math.isfinite(total):
            finite = None if not math.isfinite(best[0]) else (DisplacementField(best[1][0]),
                                                               DisplacementField(best[1][1]))
            raise OptimizationError("non-finite loss", iteration=it, fields=finite, level=level)
        trace.append(total)
        if total < best[0]:
            best = (total, params)
        if last:
            break
        try:
            params, state = adam_step(params, np.stack([gf, gb]), state, cfg.learning_rate,
                                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        except OptimizationError as exc:
            raise OptimizationError("non-finite gradient", iteration=it,
                                    fields=(DisplacementField(best[1][0]),
                                            DisplacementField(best[1][1])),
                                    level=level) from exc
    return best[1][0], best[1][1], trace, best[0]


def _check_pair(X: Volume, Y: Volume):
    if X.data.shape != Y.data.shape:
        raise ShapeError(f"X {X.data.shape} and Y {Y.data.shape} differ in shape")


def instance_optimize(X: Volume, Y: Volume, init_fwd: DisplacementField, init_bwd: DisplacementField,
                      spec: LossSpec, cfg: OptimConfig) -> RegistrationResult:
    """Run ``cfg.iterations`` Adam steps on both fields and keep the best iterate.

    The trace holds the loss of the initialization followed by the loss after
    each step, so it has ``cfg.iterations + 1`` entries.
    """
    _check_pair(X, Y)
    if init_fwd.dims != X.dims or init_bwd.dims != X.dims:
        raise ShapeError(f"initial field dims do not match volume dims {X.dims}")
    start = time.perf_counter()
    uf, ub, trace, best = _optimize_arrays(X.data, Y.data, init_fwd.data, init_bwd.data, spec, cfg)
    return RegistrationResult(DisplacementField(uf), DisplacementField(ub), [trace], best,
                              time.perf_counter() - start, [X.dims])


def downsample(data: np.ndarray) -> np.ndarray:
    """2x2x2 average pooling over the last three axes; odd remainders are dropped."""
    nz, ny, nx = (n // 2 for n in data.shape[-3:])
    d = np.asarray(data, dtype=np.float64)[..., :2 * nz, :2 * ny, :2 * nx]
    d = d.reshape(d.shape[:-3] + (nz, 2, ny, 2, nx, 2))
    return d.mean(axis=(-5, -3, -1))


def upsample_array(u: np.ndarray, target_dims) -> np.ndarray:
    nx, ny, nz = target_dims
    src = (u.shape[3], u.shape[2], u.shape[1])
    ratio = [t / s for t, s in zip((nx, ny, nz), src)]
    # voxel centers of the fine grid expressed in coarse voxel coordinates
    cx = (np.arange(nx) + 0.5) / ratio[0] - 0.5
    cy = (np.arange(ny) + 0.5) / ratio[1] - 0.5
    cz = (np.arange(nz) + 0.5) / ratio[2] - 0.5
    z, y, x = np.meshgrid(cz, cy, cx, indexing="ij")
    out = interpolate(u, x, y, z)
    for i in range(3):
        out[i] *= ratio[i]
    return out


def upsample_field(u: DisplacementField, target_dims) -> DisplacementField:
    """Resample a field onto a finer grid, rescaling displacements to the new voxel size."""
    target = check_dims(target_dims)
    if any(t < s for t, s in zip(target, u.dims)):
        raise ValidationError(f"cannot upsample {u.dims} to smaller dims {target}")
    return DisplacementField(upsample_array(u.data, target))


def pyramid_dims(dims, levels: int) -> list[tuple[int, int, int]]:
    """Grid sizes from coarsest to finest."""
    out = [tuple(dims)]
    for _ in range(levels - 1):
        out.append(tuple(n // 2 for n in out[-1]))
    return out[::-1]


def register(X: Volume, Y: Volume, spec: LossSpec, cfg: OptimConfig | None = None,
             progress=None) -> RegistrationResult:
    """Coarse-to-fine bidirectional registration starting from zero fields.

    ``progress``, if given, is called as ``progress(level, dims, trace)`` after
    each level finishes.
    """
    cfg = cfg or OptimConfig()
    _check_pair(X, Y)
    if min(X.dims) < 2 ** (cfg.levels - 1):
        raise ValidationError(f"volume dims {X.dims} too small for {cfg.levels} pyramid levels")
    start = time.perf_counter()
    xs, ys = [X.data.astype(np.float64)], [Y.data.astype(np.float64)]
    for _ in range(cfg.levels - 1):
        xs.append(downsample(xs[-1]))
        ys.append(downsample(ys[-1]))
    xs.reverse()
    ys.reverse()

    traces, dims_list = [], []
    uf = ub = None
    best = math.inf
    for level, (x, y) in enumerate(zip(xs, ys)):
        dims = (x.shape[3], x.shape[2], x.shape[1])
        if uf is None:
            uf = zero_field(dims).data
            ub = uf
        else:
            uf = upsample_array(uf, dims)
            ub = upsample_array(ub, dims)
        uf, ub, trace, best = _optimize_arrays(x, y, uf, ub, spec, cfg, level=level)
        log.info("level %d %s: loss %.6g -> %.6g", level, dims, trace[0], best)
        traces.append(trace)
        dims_list.append(dims)
        if progress is not None:
            progress(level, dims, trace)
    return RegistrationResult(DisplacementField(uf), DisplacementField(ub), traces, best,
                              time.perf_counter() - start, dims_list)

