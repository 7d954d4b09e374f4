"""Value types and intensity normalization.

Array layout
------------
Volumes hold a ``(C, nz, ny, nx)`` array and displacement fields a
``(3, nz, ny, nx)`` array, both C-contiguous. Flattened, the element at voxel
``(x, y, z)`` and channel/component ``c`` therefore sits at::

    ((c * nz + z) * ny + y) * nx + x

i.e. x varies fastest, then y, z and channel, which is also the NIfTI on-disk
order. Field component 0 is the displacement along x, 1 along y, 2 along z,
all in voxel units. Points are ``(x, y, z)`` tuples with voxel centers at
integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidVolumeError, ShapeError, ValidationError

MSE = "mse"
NCC = "ncc"
METRIC_KINDS = (MSE, NCC)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True, order="C")
    a.setflags(write=False)
    return a


def _check_spacing(spacing) -> tuple[float, float, float]:
    try:
        sp = tuple(float(s) for s in spacing)
    except (TypeError, ValueError) as exc:
        raise InvalidVolumeError(f"spacing must be three numbers, got {spacing!r}") from exc
    if len(sp) != 3 or not all(math.isfinite(s) and s > 0 for s in sp):
        raise InvalidVolumeError(f"spacing must be three positive finite numbers, got {spacing!r}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume:
    """Multi-channel 3D scalar image.

    ``data`` has shape ``(C, nz, ny, nx)``; float32 and float64 storage are both
    accepted, all arithmetic downstream is done in float64.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[np.newaxis]
        if data.ndim != 4 or min(data.shape) < 1:
            raise InvalidVolumeError(f"volume data must have shape (C, nz, ny, nx), got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise InvalidVolumeError("volume contains non-finite intensities")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        _, nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def get(self, x: int, y: int, z: int, c: int = 0) -> float:
        return float(self.data.reshape(-1)[linear_index(self.dims, x, y, z, c)])

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.spacing == other.spacing and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense displacement in voxel units, ``data`` shaped ``(3, nz, ny, nx)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 4 or data.shape[0] != 3 or min(data.shape) < 1:
            raise ShapeError(f"field data must have shape (3, nz, ny, nx), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("displacement field contains non-finite components")
        object.__setattr__(self, "data", _readonly(data))

    @property
    def dims(self) -> tuple[int, int, int]:
        _, nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def get(self, x: int, y: int, z: int) -> tuple[float, float, float]:
        flat = self.data.reshape(-1)
        return tuple(float(flat[linear_index(self.dims, x, y, z, c)]) for c in range(3))

    def magnitude(self) -> np.ndarray:
        d = self.data.astype(np.float64)
        return np.sqrt(np.sum(d * d, axis=0))

    def __eq__(self, other):
        if not isinstance(other, DisplacementField):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)


def linear_index(dims: Sequence[int], x: int, y: int, z: int, c: int = 0) -> int:
    nx, ny, nz = dims
    return ((c * nz + z) * ny + y) * nx + x


def check_dims(dims) -> tuple[int, int, int]:
    try:
        d = tuple(int(n) for n in dims)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"dims must be three integers, got {dims!r}") from exc
    if len(d) != 3 or min(d) < 1:
        raise ValidationError(f"dims must be three positive integers, got {dims!r}")
    return d


def zero_field(dims) -> DisplacementField:
    nx, ny, nz = check_dims(dims)
    return DisplacementField(np.zeros((3, nz, ny, nx)))


def normalize(v: Volume) -> Volume:
    """Min-max map every channel independently onto [0, 1].

    Constant channels become all zeros.
    """
    if not isinstance(v, Volume):
        raise InvalidVolumeError(f"expected a Volume, got {type(v).__name__}")
    data = v.data.astype(np.float64)
    out = np.zeros_like(data)
    for c in range(data.shape[0]):
        lo = data[c].min()
        hi = data[c].max()
        if hi > lo:
            out[c] = (data[c] - lo) / (hi - lo)
    return Volume(out, v.spacing)


@dataclass(frozen=True)
class LossSpec:
    """Metric weights and regularization weight of the combined objective."""

    metrics: tuple[tuple[str, float], ...] = ((MSE, 0.5), (NCC, 0.5))
    lam: float = 1.0
    ncc_window: int = 9
    ncc_epsilon: float = 1e-5

    def __post_init__(self):
        metrics = tuple((str(k).lower(), float(w)) for k, w in self.metrics)
        if not metrics:
            raise ValidationError("at least one similarity metric is required")
        kinds = [k for k, _ in metrics]
        for k, w in metrics:
            if k not in METRIC_KINDS:
                raise ValidationError(f"unknown metric {k!r}; expected one of {METRIC_KINDS}")
            if not (math.isfinite(w) and w >= 0):
                raise ValidationError(f"metric weight for {k!r} must be a finite number >= 0, got {w}")
        if len(set(kinds)) != len(kinds):
            raise ValidationError(f"duplicate metric kinds in {kinds}")
        lam = float(self.lam)
        if not (math.isfinite(lam) and lam >= 0):
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        window = self.ncc_window
        if isinstance(window, bool) or int(window) != window or window < 3 or window % 2 == 0:
            raise ValidationError(f"ncc_window must be an odd integer >= 3, got {window}")
        eps = float(self.ncc_epsilon)
        if not (math.isfinite(eps) and eps > 0):
            raise ValidationError(f"ncc_epsilon must be > 0, got {self.ncc_epsilon}")
        object.__setattr__(self, "metrics", metrics)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "ncc_window", int(window))
        object.__setattr__(self, "ncc_epsilon", eps)

    @classmethod
    def equal_weights(cls, kinds: Iterable[str] = (MSE, NCC), **kwargs) -> "LossSpec":
        kinds = list(kinds)
        if not kinds:
            raise ValidationError("at least one similarity metric is required")
        w = 1.0 / len(kinds)
        return cls(metrics=tuple((k, w) for k in kinds), **kwargs)

    @property
    def weight_sum(self) -> float:
        return math.fsum(w for _, w in self.metrics)

    def scaled(self, factor: float) -> "LossSpec":
        return LossSpec(tuple((k, w * factor) for k, w in self.metrics), self.lam * factor,
                        self.ncc_window, self.ncc_epsilon)

    def to_dict(self) -> dict:
        return {
            "metrics": [{"name": k, "weight": w} for k, w in self.metrics],
            "lambda": self.lam,
            "ncc_window": self.ncc_window,
            "ncc_epsilon": self.ncc_epsilon,
        }


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    iterations: int = 30
    levels: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        lr = float(self.learning_rate)
        if not (math.isfinite(lr) and lr > 0):
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("iterations", "levels"):
            n = getattr(self, name)
            if isinstance(n, bool) or int(n) != n or n < 1:
                raise ValidationError(f"{name} must be a positive integer, got {n}")
            object.__setattr__(self, name, int(n))
        for name in ("adam_beta1", "adam_beta2"):
            b = float(getattr(self, name))
            if not 0 <= b < 1:
                raise ValidationError(f"{name} must lie in [0, 1), got {b}")
            object.__setattr__(self, name, b)
        if not float(self.adam_eps) > 0:
            raise ValidationError(f"adam_eps must be > 0, got {self.adam_eps}")
        object.__setattr__(self, "learning_rate", lr)
        object.__setattr__(self, "adam_eps", float(self.adam_eps))

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "levels": self.levels,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
        }


@dataclass(frozen=True)
class Landmark:
    id: str
    fixed: tuple[float, float, float]
    moving: tuple[float, float, float]


@dataclass(frozen=True)
class LandmarkSet:
    """Paired landmarks in continuous voxel coordinates of each image."""

    entries: tuple[Landmark, ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = []
        seen = set()
        for e in self.entries:
            if not isinstance(e, Landmark):
                e = Landmark(*e)
            lid = str(e.id)
            if lid in seen:
                raise ValidationError(f"duplicate landmark id {lid!r}")
            seen.add(lid)
            fixed = tuple(float(v) for v in e.fixed)
            moving = tuple(float(v) for v in e.moving)
            if len(fixed) != 3 or len(moving) != 3:
                raise ValidationError(f"landmark {lid!r} needs three coordinates per point")
            if not all(math.isfinite(v) for v in fixed + moving):
                raise ValidationError(f"landmark {lid!r} has non-finite coordinates")
            entries.append(Landmark(lid, fixed, moving))
        object.__setattr__(self, "entries", tuple(entries))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def fixed_points(self) -> np.ndarray:
        return np.array([e.fixed for e in self.entries], dtype=np.float64).reshape(-1, 3)

    def moving_points(self) -> np.ndarray:
        return np.array([e.moving for e in self.entries], dtype=np.float64).reshape(-1, 3)

    def check_bounds(self, fixed_dims, moving_dims=None) -> None:
        """Raise if any coordinate lies outside ``[-0.5, n + 0.5)`` of its grid."""
        moving_dims = fixed_dims if moving_dims is None else moving_dims
        for e in self.entries:
            for pt, dims, which in ((e.fixed, fixed_dims, "fixed"), (e.moving, moving_dims, "moving")):
                for v, n in zip(pt, dims):
                    if not -0.5 <= v < n + 0.5:
                        raise ValidationError(
                            f"landmark {e.id!r}: {which} coordinate {pt} outside grid {tuple(dims)}")
