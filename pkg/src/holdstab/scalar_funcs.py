"""One-dimensional function toolbox.

K-infinity functions (power law or tabulated), scalar infimal convolution and
convex/concave envelopes on an interval.  Everything here is immutable and
works on floats or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, InputError

INFCONV_GRID = 1024
INFCONV_REFINE = 60
ENVELOPE_GRID = 512


def _bisect_inverse(func: Callable[[float], float], v: float, hi: float = 1.0) -> float:
    """Solve func(s) = v for nondecreasing ``func`` with func(0) <= v."""
    lo = 0.0
    if func(lo) >= v:
        return lo
    n_expand = 0
    while func(hi) < v:
        lo, hi = hi, 2.0 * hi
        n_expand += 1
        if n_expand > 2000:
            raise DomainError(f"cannot bracket inverse of value {v}")
    # bisect to machine precision; the residual bound then holds with room to spare
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if func(mid) < v:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class KappaFunction:
    """A class K-infinity function: ``c * s**p`` or a tabulated piecewise-linear curve.

    Tabulated functions interpolate linearly between knots and extrapolate
    beyond the last knot with ``slope`` (defaults to the last segment's slope).
    """

    kind: str
    c: float = 1.0
    p: float = 1.0
    knots: tuple = field(default=())
    slope: float | None = None

    def __post_init__(self):
        if self.kind == "power":
            if not (self.c > 0 and self.p > 0):
                raise InputError(f"power law needs c > 0 and p > 0, got c={self.c}, p={self.p}")
        elif self.kind == "table":
            kn = np.asarray(self.knots, dtype=float)
            if kn.ndim != 2 or kn.shape[1] != 2 or kn.shape[0] < 2:
                raise InputError("tabulated function needs at least two (s, v) knots")
            if kn[0, 0] != 0.0 or kn[0, 1] != 0.0:
                raise InputError("tabulated function must start at (0, 0)")
            if np.any(np.diff(kn[:, 0]) <= 0) or np.any(np.diff(kn[:, 1]) <= 0):
                raise InputError("tabulated knots must be strictly increasing in s and v")
            slope = self.slope
            if slope is None:
                slope = (kn[-1, 1] - kn[-2, 1]) / (kn[-1, 0] - kn[-2, 0])
            if slope <= 0:
                raise InputError("extrapolation slope must be positive")
            object.__setattr__(self, "knots", tuple(map(tuple, kn.tolist())))
            object.__setattr__(self, "slope", float(slope))
        else:
            raise InputError(f"unknown K-infinity kind {self.kind!r}")

    @classmethod
    def power(cls, c: float, p: float) -> "KappaFunction":
        return cls("power", c=float(c), p=float(p))

    @classmethod
    def table(cls, knots: Sequence[Sequence[float]], slope: float | None = None) -> "KappaFunction":
        return cls("table", knots=tuple(tuple(k) for k in knots), slope=slope)

    @classmethod
    def from_config(cls, spec: dict) -> "KappaFunction":
        kind = spec.get("kind")
        if kind == "power":
            return cls.power(spec["c"], spec["p"])
        if kind == "table":
            return cls.table(spec["knots"], spec.get("slope"))
        raise InputError(f"unknown K-infinity kind {kind!r}")

    def to_config(self) -> dict:
        if self.kind == "power":
            return {"kind": "power", "c": self.c, "p": self.p}
        return {"kind": "table", "knots": [list(k) for k in self.knots], "slope": self.slope}

    def __call__(self, s):
        s_arr = np.asarray(s, dtype=float)
        if np.any(s_arr < 0):
            raise DomainError("K-infinity functions are defined on s >= 0")
        if self.kind == "power":
            out = self.c * s_arr**self.p
        else:
            kn = np.asarray(self.knots)
            out = np.interp(s_arr, kn[:, 0], kn[:, 1])
            beyond = s_arr > kn[-1, 0]
            out = np.where(beyond, kn[-1, 1] + self.slope * (s_arr - kn[-1, 0]), out)
        return float(out) if out.ndim == 0 else out

    def inverse(self, v: float) -> float:
        if v < 0:
            raise DomainError("cannot invert a K-infinity function at a negative value")
        if self.kind == "power":
            return float((v / self.c) ** (1.0 / self.p))
        kn = np.asarray(self.knots)
        return _bisect_inverse(self, float(v), hi=float(kn[-1, 0]))


def eval_kappa(f: KappaFunction, s: float) -> float:
    if s < 0:
        raise DomainError(f"eval_kappa needs s >= 0, got {s}")
    return f(s)


def invert_kappa(f, v: float) -> float:
    """Inverse of any nondecreasing function object exposing ``inverse``."""
    return f.inverse(v)


def _infconv_scalar(f: Callable, lam: float, s: float) -> float:
    fs = float(f(s))
    upper = s + 6.0 * lam * np.sqrt(max(1.0, fs))
    grid = np.linspace(0.0, upper, INFCONV_GRID)
    two_lam2 = 2.0 * lam * lam

    def obj(t):
        return np.asarray(f(t), dtype=float) + (s - t) ** 2 / two_lam2

    vals = obj(grid)
    i = int(np.argmin(vals))
    best = float(vals[i])
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, INFCONV_GRID - 1)]
    for _ in range(INFCONV_REFINE):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        v1, v2 = obj(np.array([m1, m2]))
        best = min(best, float(v1), float(v2))
        if v1 <= v2:
            hi = m2
        else:
            lo = m1
    return max(0.0, min(best, fs))


def scalar_inf_convolution(f: Callable, lam: float, s):
    """inf over t >= 0 of ``f(t) + (s - t)**2 / (2 lam**2)``."""
    if lam <= 0:
        raise InputError("lambda must be positive")
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise DomainError("inf-convolution is evaluated on s >= 0")
    if s_arr.ndim == 0:
        return _infconv_scalar(f, lam, float(s_arr))
    return np.array([_infconv_scalar(f, lam, float(v)) for v in s_arr.ravel()]).reshape(s_arr.shape)


@dataclass(frozen=True)
class InfConvolvedKappa:
    """Scalar inf-convolution of a K-infinity function, as a callable with an inverse."""

    base: KappaFunction
    lam: float

    def __call__(self, s):
        return scalar_inf_convolution(self.base, self.lam, s)

    def inverse(self, v: float) -> float:
        if v < 0:
            raise DomainError("cannot invert at a negative value")
        return _bisect_inverse(self, float(v), hi=max(1.0, self.base.inverse(v)))


def _half_hull(pts: np.ndarray, lower: bool) -> np.ndarray:
    hull: list[tuple[float, float]] = []
    sign = 1.0 if lower else -1.0
    for x, y in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            a, b = (x2 - x1) * (y - y1), (y2 - y1) * (x - x1)
            # drop the middle point unless it makes a strict turn in the hull's direction
            if sign * (a - b) <= 1e-12 * (abs(a) + abs(b)):
                hull.pop()
            else:
                break
        hull.append((float(x), float(y)))
    return np.array(hull)


@dataclass(frozen=True)
class EnvelopeFunction:
    """Piecewise-linear lower-convex or upper-concave envelope on ``[s_0, s_last]``.

    Outside the knot interval the terminal linear pieces are extended;
    :meth:`extrapolates` tells whether that happened for a given argument.
    """

    knots: tuple
    orientation: str

    @property
    def s(self) -> np.ndarray:
        return np.array([k[0] for k in self.knots])

    @property
    def v(self) -> np.ndarray:
        return np.array([k[1] for k in self.knots])

    @property
    def interval(self) -> tuple[float, float]:
        return self.knots[0][0], self.knots[-1][0]

    def extrapolates(self, s: float) -> bool:
        lo, hi = self.interval
        return s < lo or s > hi

    def __call__(self, s):
        xs, vs = self.s, self.v
        s_arr = np.asarray(s, dtype=float)
        out = np.interp(s_arr, xs, vs)
        left_slope = (vs[1] - vs[0]) / (xs[1] - xs[0])
        right_slope = (vs[-1] - vs[-2]) / (xs[-1] - xs[-2])
        out = np.where(s_arr > xs[-1], vs[-1] + right_slope * (s_arr - xs[-1]), out)
        out = np.where(s_arr < xs[0], vs[0] + left_slope * (s_arr - xs[0]), out)
        return float(out) if out.ndim == 0 else out

    def inverse(self, v: float) -> float:
        vs = self.v
        if v < vs[0]:
            raise DomainError(f"value {v} below the envelope's range")
        right_slope = (vs[-1] - vs[-2]) / (self.s[-1] - self.s[-2])
        if v > vs[-1] and right_slope <= 0:
            raise DomainError(f"value {v} is not attained by the envelope")
        return _bisect_inverse(self, float(v), hi=max(1.0, float(self.s[-1])))


def convex_envelope(samples: Sequence[Sequence[float]], orientation: str = "lower-convex") -> EnvelopeFunction:
    """Monotone-chain hull of sampled points of a 1-D function.

    ``orientation`` is ``"lower-convex"`` or ``"upper-concave"``.
    """
    pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise InputError("an envelope needs at least two samples")
    if np.any(np.diff(pts[:, 0]) <= 0):
        raise InputError("sample abscissae must be strictly increasing")
    if orientation not in ("lower-convex", "upper-concave"):
        raise InputError(f"unknown orientation {orientation!r}")
    hull = _half_hull(pts, lower=orientation == "lower-convex")
    return EnvelopeFunction(tuple(map(tuple, hull.tolist())), orientation)


def envelope_of(func: Callable, r_max: float, orientation: str, n: int = ENVELOPE_GRID) -> EnvelopeFunction:
    """Envelope of ``func`` sampled on a uniform ``n``-point grid of [0, r_max]."""
    if r_max <= 0:
        raise DomainError("envelope interval must have positive length")
    grid = np.linspace(0.0, r_max, n)
    vals = np.asarray(func(grid), dtype=float)
    return convex_envelope(np.column_stack([grid, vals]), orientation)
