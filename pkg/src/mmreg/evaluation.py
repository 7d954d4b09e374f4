"""Landmark evaluation: TRE, hit-rate curves and paired t-tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DisplacementField, LandmarkSet
from .errors import ValidationError
from .sampling import warp_points

# Fixed-grid landmarks are mapped through the forward field and compared with
# their moving-image counterparts.
TRE_DIRECTION = "fixed->moving via forward field"


@dataclass(frozen=True)
class TreReport:
    distances: dict  # landmark id -> distance in mm, in landmark order
    mean: float
    std: float
    count: int

    @classmethod
    def from_distances(cls, distances: dict) -> "TreReport":
        values = [float(d) for d in distances.values()]
        if not values:
            raise ValidationError("TRE report needs at least one distance")
        if any(not math.isfinite(d) or d < 0 for d in values):
            raise ValidationError("distances must be finite and >= 0")
        n = len(values)
        mean = math.fsum(values) / n
        # n - 1 divisor; a single landmark has no spread
        std = math.sqrt(math.fsum((d - mean) ** 2 for d in values) / (n - 1)) if n > 1 else 0.0
        return cls(dict(zip(distances.keys(), values)), mean, std, n)

    def to_dict(self) -> dict:
        return {"distances_mm": dict(self.distances), "mean": self.mean, "std": self.std,
                "count": self.count, "direction": TRE_DIRECTION}


def tre(landmarks: LandmarkSet, u_fwd: DisplacementField, spacing=(1.0, 1.0, 1.0)) -> TreReport:
    """Euclidean distance in mm between warped fixed landmarks and moving landmarks."""
    if len(landmarks) == 0:
        raise ValidationError("landmark set is empty")
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,) or not np.all(spacing > 0):
        raise ValidationError(f"spacing must be three positive numbers, got {spacing}")
    landmarks.check_bounds(u_fwd.dims)
    warped = warp_points(u_fwd, landmarks.fixed_points())
    delta = (warped - landmarks.moving_points()) * spacing
    dist = np.sqrt(np.sum(delta * delta, axis=1))
    return TreReport.from_distances(dict(zip(landmarks.ids, dist.tolist())))


@dataclass(frozen=True)
class HitRateCurve:
    points: tuple  # (tau_mm, fraction) pairs

    def to_dict(self) -> dict:
        return {"tau_mm": [t for t, _ in self.points], "fraction": [f for _, f in self.points]}


def hit_rate(report: TreReport, taus) -> HitRateCurve:
    """Fraction of landmarks with TRE <= tau, for each tau."""
    if report.count == 0:
        raise ValidationError("empty TRE report")
    taus = [float(t) for t in taus]
    if any(not math.isfinite(t) or t < 0 for t in taus):
        raise ValidationError("tolerances must be finite and >= 0")
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise ValidationError("tolerances must be sorted ascending")
    d = np.sort(np.fromiter(report.distances.values(), dtype=np.float64))
    hits = np.searchsorted(d, taus, side="right")
    return HitRateCurve(tuple((t, int(h) / report.count) for t, h in zip(taus, hits)))


# -- paired t-test -----------------------------------------------------------

def _betacf(a: float, b: float, x: float, tol: float = 1e-12, max_iter: int = 10000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: float) -> float:
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return min(1.0, max(0.0, betainc_regularized(dof / 2.0, 0.5, x)))


@dataclass(frozen=True)
class PairedTTest:
    t: float
    dof: int
    p: float

    def to_dict(self) -> dict:
        # JSON has no infinity; the degenerate case is spelled out
        t = self.t if math.isfinite(self.t) else ("inf" if self.t > 0 else "-inf")
        return {"t": t, "dof": self.dof, "p": self.p}


def paired_t_test(a: TreReport, b: TreReport) -> PairedTTest:
    """Two-sided paired t-test on per-landmark distances of ``a`` minus ``b``."""
    if set(a.distances) != set(b.distances):
        raise ValidationError("reports cover different landmark ids")
    ids = list(a.distances)
    n = len(ids)
    if n < 2:
        raise ValidationError("paired t-test needs at least two pairs")
    d = [a.distances[i] - b.distances[i] for i in ids]
    mean = math.fsum(d) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in d) / (n - 1))
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return PairedTTest(0.0, dof, 1.0)
        return PairedTTest(math.copysign(math.inf, mean), dof, 0.0)
    t = mean / (sd / math.sqrt(n))
    return PairedTTest(t, dof, student_t_two_sided_p(t, dof))


# -- comparison table ----------------------------------------------------------

@dataclass(frozen=True)
class ComparisonRow:
    name: str
    report: TreReport


@dataclass(frozen=True)
class Comparison:
    rows: tuple
    tests: tuple = field(default_factory=tuple)  # (name, PairedTTest) against rows[0]

    @property
    def baseline(self) -> str:
        return self.rows[0].name

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "rows": [{"name": r.name, "mean": r.report.mean, "std": r.report.std,
                      "n": r.report.count} for r in self.rows],
            "t_tests": [{"name": name, "against": self.baseline, **tt.to_dict()}
                        for name, tt in self.tests],
        }

    def format_table(self) -> str:
        width = max(len(r.name) for r in self.rows)
        lines = [f"{'config':<{width}}  TRE mean +- std [mm]   n   p vs {self.baseline}"]
        pvals = dict(self.tests)
        for r in self.rows:
            p = pvals.get(r.name)
            ptxt = "-" if p is None else f"{p.p:.4f}"
            lines.append(f"{r.name:<{width}}  {r.report.mean:8.3f} +- {r.report.std:<8.3f}  "
                         f"{r.report.count:3d}   {ptxt}")
        return "\n".join(lines)


def compare(reports) -> Comparison:
    """Summary rows plus paired t-tests of every later report against the first.

    ``reports`` is a sequence of ``(name, TreReport)`` pairs or a dict.
    """
    items = list(reports.items()) if isinstance(reports, dict) else list(reports)
    if not items:
        raise ValidationError("nothing to compare")
    rows = tuple(ComparisonRow(str(name), rep) for name, rep in items)
    base = rows[0].report
    tests = tuple((r.name, paired_t_test(r.report, base)) for r in rows[1:]) if base.count >= 2 else ()
    return Comparison(rows, tests)
