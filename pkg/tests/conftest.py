import numpy as np
import pytest

from mmreg import DisplacementField, Volume

# rich texture for recovery tests; the default 12 blobs leave most of a volume flat
TEXTURED_BLOBS = 300


def smooth_field(rng, dims, amplitude=1.0, knots=3):
    """Random smooth field: random knots trilinearly upsampled with numpy only."""
    nx, ny, nz = dims
    coarse = rng.normal(size=(3, knots, knots, knots))
    axes = [np.linspace(0, knots - 1, n) for n in (nz, ny, nx)]
    out = coarse
    for axis, pos in zip((1, 2, 3), axes):
        lo = np.clip(np.floor(pos).astype(int), 0, knots - 2)
        f = pos - lo
        shape = [1, 1, 1, 1]
        shape[axis] = -1
        f = f.reshape(shape)
        out = np.take(out, lo, axis=axis) * (1 - f) + np.take(out, lo + 1, axis=axis) * f
    return DisplacementField(amplitude * out / np.abs(out).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_pair(rng):
    """Smooth-ish random 2-channel 12^3 pair."""
    from scipy.ndimage import gaussian_filter

    def make():
        d = rng.random((2, 12, 12, 12))
        return np.stack([gaussian_filter(c, 1.0) for c in d])

    return Volume(make()), Volume(make())


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
