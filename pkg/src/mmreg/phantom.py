"""Synthetic fixed/moving pairs with an exactly known deformation.

Random numbers come from numpy's PCG64 bit generator seeded directly with the
integer seed (``numpy.random.Generator(numpy.random.PCG64(seed))``). Draws are
made in this order: control-grid vectors, blob centers, blob widths, blob
amplitudes, ramp direction, channel-2 offset, landmark positions. Changing the
order changes the phantom bytes.

Scene and deformation are closed forms, so ``moving(q) = S(q)`` and
``fixed(p) = S(p + g(p))`` are both exact point samples. ``g`` is the
trilinear interpolation of random vectors on a coarse control grid whose nodes
span the image corners, scaled so its largest magnitude equals
``max_amplitude`` voxels (the maximum of a multilinear field's norm is reached
at a control node). A pure translation can be requested instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DisplacementField, Landmark, LandmarkSet, Volume, check_dims
from .errors import ValidationError
from .sampling import grid_coordinates, interpolate


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple = (48, 48, 48)
    channels: int = 1
    spacing: tuple = (1.0, 1.0, 1.0)
    control_grid: int = 4
    max_amplitude: float = 4.0
    n_landmarks: int = 6
    n_blobs: int = 12
    translation: tuple | None = None  # overrides the random field when set

    def __post_init__(self):
        dims = self.dims
        if isinstance(dims, int):
            dims = (dims, dims, dims)
        dims = check_dims(dims)
        if min(dims) < 8:
            raise ValidationError(f"phantom dims must be >= 8 per axis, got {dims}")
        object.__setattr__(self, "dims", dims)
        if self.channels not in (1, 2):
            raise ValidationError(f"phantom channels must be 1 or 2, got {self.channels}")
        if not (math.isfinite(self.max_amplitude) and self.max_amplitude >= 0):
            raise ValidationError(f"max_amplitude must be >= 0, got {self.max_amplitude}")
        if self.n_landmarks < 1:
            raise ValidationError("at least one landmark is required")
        if self.n_blobs < 0:
            raise ValidationError("n_blobs must be >= 0")
        if self.control_grid < 2:
            raise ValidationError("control_grid must be >= 2")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.translation is not None:
            t = tuple(float(v) for v in self.translation)
            if len(t) != 3 or not all(math.isfinite(v) for v in t):
                raise ValidationError(f"translation must be three finite numbers, got {self.translation}")
            object.__setattr__(self, "translation", t)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def amplitude(self) -> float:
        """Largest displacement magnitude of the ground truth, in voxels."""
        if self.translation is not None:
            return math.sqrt(sum(v * v for v in self.translation))
        return float(self.max_amplitude)


@dataclass(frozen=True)
class PhantomCase:
    fixed: Volume
    moving: Volume
    gt_field: DisplacementField
    landmarks: LandmarkSet


class _Deformation:
    def __init__(self, spec: PhantomSpec, rng: np.random.Generator):
        self.dims = spec.dims
        k = spec.control_grid
        ctrl = rng.uniform(-1.0, 1.0, size=(3, k, k, k))
        self.translation = spec.translation
        peak = np.sqrt((ctrl ** 2).sum(axis=0)).max()
        self.ctrl = ctrl * (spec.max_amplitude / peak) if peak > 0 else ctrl * 0.0
        self.k = k

    def __call__(self, x, y, z) -> np.ndarray:
        """Displacement at points (x, y, z), shape ``(3, *x.shape)``."""
        if self.translation is not None:
            return np.stack([np.full(np.shape(x), t) for t in self.translation])
        nx, ny, nz = self.dims
        s = self.k - 1
        return interpolate(self.ctrl, np.asarray(x) * (s / (nx - 1)), np.asarray(y) * (s / (ny - 1)),
                           np.asarray(z) * (s / (nz - 1)))


class _Scene:
    def __init__(self, spec: PhantomSpec, rng: np.random.Generator):
        dims = np.array(spec.dims, dtype=np.float64)
        n = spec.n_blobs
        self.centers = rng.uniform(0.0, 1.0, size=(n, 3)) * (dims - 1)
        # more blobs means finer texture: width tracks the mean blob spacing
        self.widths = rng.uniform(0.2, 0.4, size=n) * dims.min() / max(n, 1) ** (1 / 3)
        self.amps = rng.uniform(0.4, 1.0, size=n)
        direction = rng.normal(size=3)
        self.ramp = 0.3 * direction / np.linalg.norm(direction) / (dims - 1)
        self.offset = rng.uniform(0.1, 0.5)

    def __call__(self, x, y, z) -> np.ndarray:
        s = 0.3 + self.ramp[0] * x + self.ramp[1] * y + self.ramp[2] * z
        for (cx, cy, cz), w, a in zip(self.centers, self.widths, self.amps):
            r2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
            s = s + a * np.exp(-r2 / (2.0 * w * w))
        return s

    def channels(self, x, y, z, count: int) -> np.ndarray:
        s = self(x, y, z)
        if count == 1:
            return s[np.newaxis]
        # monotone but not affine: keeps local correlation ordering, breaks MSE
        return np.stack([s, (s + self.offset) ** 2])


def _joint_normalize(fixed: np.ndarray, moving: np.ndarray):
    """Min-max normalize both volumes per channel with one shared affine map.

    Separate maps would give the two images slightly different intensity
    scales and bias intensity-based metrics in low-contrast regions.
    """
    fixed = fixed.copy()
    moving = moving.copy()
    for c in range(fixed.shape[0]):
        lo = min(fixed[c].min(), moving[c].min())
        hi = max(fixed[c].max(), moving[c].max())
        if hi > lo:
            fixed[c] = (fixed[c] - lo) / (hi - lo)
            moving[c] = (moving[c] - lo) / (hi - lo)
        else:
            fixed[c] = 0.0
            moving[c] = 0.0
    return fixed, moving


def generate(spec: PhantomSpec) -> PhantomCase:
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    deformation = _Deformation(spec, rng)
    scene = _Scene(spec, rng)

    x, y, z = grid_coordinates(spec.dims)
    g = deformation(x, y, z)
    moving = scene.channels(x, y, z, spec.channels)
    fixed = scene.channels(x + g[0], y + g[1], z + g[2], spec.channels)

    margin = int(math.ceil(spec.amplitude)) + 2
    lo = margin
    hi = [n - 1 - margin for n in spec.dims]
    if any(h < lo for h in hi):
        raise ValidationError(
            f"dims {spec.dims} too small to place landmarks {margin} voxels from the boundary")
    span = [h - lo + 1 for h in hi]
    capacity = span[0] * span[1] * span[2]
    if spec.n_landmarks > capacity:
        raise ValidationError(f"cannot place {spec.n_landmarks} distinct landmarks in {capacity} voxels")
    flat = rng.choice(capacity, size=spec.n_landmarks, replace=False)
    iz, rem = np.divmod(flat, span[0] * span[1])
    iy, ix = np.divmod(rem, span[0])
    pts = np.stack([ix + lo, iy + lo, iz + lo], axis=1).astype(np.float64)
    disp = deformation(pts[:, 0], pts[:, 1], pts[:, 2]).T
    entries = [Landmark(f"L{i + 1}", tuple(p), tuple(p + d))
               for i, (p, d) in enumerate(zip(pts, disp))]

    fixed, moving = _joint_normalize(fixed, moving)
    return PhantomCase(
        fixed=Volume(fixed, spec.spacing),
        moving=Volume(moving, spec.spacing),
        gt_field=DisplacementField(g),
        landmarks=LandmarkSet(tuple(entries)),
    )
