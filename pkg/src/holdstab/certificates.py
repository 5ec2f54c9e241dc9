"""Attraction-radius certificates for sample-and-hold stabilisation.

Given the bound set, the K-infinity sandwich of the CLF and the tuning
parameters (lam, delta, eta), this module builds the radial growth bound and
its forecast, evaluates the attraction and mean attraction functions, runs
the fixed-point iteration and the basin check, and composes the probability
and mean radii.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InputError
from .scalar_funcs import ENVELOPE_GRID, InfConvolvedKappa, KappaFunction, envelope_of
from .system_model import BoundsSet

FORECAST_BLOWUP = 1e9
FORECAST_MIN_STEPS = 64
FORECAST_MAX_STEP = 1e-3
RHO_SAMPLES_PER_UNIT = 512


@dataclass(frozen=True)
class RadialGrowthBound:
    """Piecewise-linear bound through the unit-interval maxima of ``f_bar + sigma_bar * z_bar``."""

    maxima: tuple  # maxima[k] = max of the raw bound over [k, k + 1]
    limit: float   # largest radius at which rho can be evaluated

    def __call__(self, y: float) -> float:
        if y < 0:
            raise DomainError("radial growth bound is defined for y >= 0")
        k = int(math.floor(y))
        if k + 1 >= len(self.maxima):
            raise DomainError(f"radial growth bound needs the bound set up to radius {k + 2}", limit=self.limit)
        frac = y - k
        return (1.0 - frac) * self.maxima[k] + frac * self.maxima[k + 1]

    def knots(self) -> list[list[float]]:
        return [[float(k), float(v)] for k, v in enumerate(self.maxima)]


class ConstantRate:
    """rho(y) = c, for closed-form forecasts."""

    def __init__(self, c: float):
        self.c = float(c)
        self.limit = math.inf

    def __call__(self, y: float) -> float:
        return self.c

    def knots(self):
        return [[0.0, self.c]]


def radial_growth_bound(bounds: BoundsSet, upto: float | None = None) -> RadialGrowthBound:
    """Radial growth bound from f_bar and sigma_bar.

    Unit-interval maxima of ``f_bar(y) + sigma_bar(y) z_bar`` are taken over a
    512-per-unit sample grid plus both endpoints.  ``upto`` limits how far
    the construction goes for unbounded bound sets.
    """
    limit = bounds.r_max
    if math.isinf(limit):
        limit = 64.0 if upto is None else float(upto) + 2.0
    n_units = int(math.floor(limit))
    if n_units < 2:
        raise DomainError("bound set must cover at least radius 2 to build a growth bound", limit=limit)
    maxima = []
    for k in range(n_units):
        ys = np.linspace(k, k + 1, RHO_SAMPLES_PER_UNIT + 1)
        raw = np.asarray(bounds.f_bar(ys), float) + np.asarray(bounds.sigma_bar(ys), float) * bounds.z_bar
        maxima.append(float(np.max(raw)))
    # rho(y) uses maxima[floor(y) + 1], so it is defined on [0, n_units - 1)
    return RadialGrowthBound(tuple(maxima), float(n_units - 1))


def radial_forecast(rho, R: float, t: float, steps: int | None = None) -> float:
    """RK4 solution of ``y' = rho(y), y(0) = R`` at time ``t``."""
    if t < 0 or R < 0:
        raise DomainError("radial forecast needs t >= 0 and R >= 0")
    if t == 0:
        return float(R)
    if steps is None:
        steps = max(FORECAST_MIN_STEPS, int(math.ceil(t / FORECAST_MAX_STEP)))
    h = t / steps
    y = float(R)
    for i in range(steps):
        try:
            k1 = rho(y)
            k2 = rho(y + 0.5 * h * k1)
            k3 = rho(y + 0.5 * h * k2)
            k4 = rho(y + h * k3)
        except DomainError as exc:
            raise DomainError(f"radial forecast leaves the bound set before t={t}; admissible t <= {i * h}",
                              limit=i * h) from exc
        y_next = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not math.isfinite(y_next) or y_next > FORECAST_BLOWUP:
            raise DomainError(f"radial forecast blows up; admissible t <= {i * h}", limit=i * h)
        y = y_next
    return y


def forecast_path(rho, R: float, times) -> np.ndarray:
    """Forecast ``y(R; t)`` at each of the nondecreasing ``times``; NaN past the admissible range.

    One RK4 pass with steps of at most 1e-3 between consecutive times.
    """
    times = np.asarray(times, float)
    if times.ndim != 1 or np.any(np.diff(times) < 0) or (times.size and times[0] < 0):
        raise InputError("times must be a nondecreasing sequence of nonnegative values")
    out = np.full(times.size, np.nan)
    y, t_prev = float(R), 0.0
    for i, t in enumerate(times):
        span = t - t_prev
        if span > 0:
            try:
                y = radial_forecast(rho, y, span, steps=max(1, int(math.ceil(span / FORECAST_MAX_STEP))))
            except DomainError:
                break
        out[i] = y
        t_prev = t
    return out


def max_admissible_delta(rho, R: float, cap: float = 10.0) -> float:
    """Largest t (up to ``cap``, to 1e-6 relative) for which the forecast from R exists."""
    try:
        radial_forecast(rho, R, cap)
        return cap
    except DomainError as exc:
        if exc.limit is None:
            raise
        lo, hi = 0.0, cap
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        try:
            radial_forecast(rho, R, mid)
            lo = mid
        except DomainError:
            hi = mid
        if hi - lo <= 1e-6 * hi:
            break
    return lo


@dataclass(frozen=True)
class CertificateInputs:
    bounds: BoundsSet
    alpha1: KappaFunction
    alpha2: KappaFunction
    alpha3: KappaFunction
    lam: float
    delta: float
    eta: float
    R: float
    rho: object = None

    def __post_init__(self):
        if not (self.lam > 0 and self.delta > 0 and self.eta >= 0 and self.R > 0):
            raise InputError("need lam > 0, delta > 0, eta >= 0 and R > 0")
        if self.rho is None:
            object.__setattr__(self, "rho", radial_growth_bound(self.bounds))

    @property
    def z_bar(self) -> float:
        return self.bounds.z_bar

    def forecast(self, R: float, t: float | None = None) -> float:
        return radial_forecast(self.rho, R, self.delta if t is None else t)

    def check_delta(self) -> None:
        """Reject a delta for which the forecast from R* does not exist on [0, delta]."""
        R_star = self.alpha1.inverse(self.alpha2(self.R))
        try:
            self.forecast(R_star)
        except DomainError:
            dmax = max_admissible_delta(self.rho, R_star, cap=self.delta)
            raise DomainError(f"delta={self.delta} too large: forecast from R*={R_star} exists only up to {dmax}",
                              limit=dmax) from None


def attraction_function(inp: CertificateInputs, R: float) -> float:
    """One-step certified radius r~(R) for the given noise bound, lam, delta and eta."""
    b = inp.bounds
    lam, delta, z_bar = inp.lam, inp.delta, b.z_bar
    root = math.sqrt(2.0 * inp.alpha2(R))
    w = R + lam * root
    y = inp.forecast(R)
    growth = b.f_bar(y) + b.sigma_bar(y) * z_bar
    bracket = (2.0 * b.lip_L(w) * b.lip_f(w) * lam**2
               + 0.5 * delta * b.lip_f(y) * growth
               + b.sigma_bar(y) * z_bar)
    arg = inp.eta + (root / lam) * bracket + delta * growth**2 / (2.0 * lam**2)
    return inp.alpha3.inverse(arg) + lam * root


@dataclass
class IterationResult:
    radii: list
    r_star: float | None
    converged: bool
    residual: float | None
    diagnostic: str = ""


def iterate_attraction(inp: CertificateInputs, R_start: float, tol: float = 1e-9, max_iter: int = 10_000) -> IterationResult:
    """Iterate ``r_l = r~(r_{l-1})`` from ``R_start`` down to its limit.

    Failure (no decay at the start, or an increasing step) is returned,
    not raised.
    """
    radii = [float(R_start)]
    try:
        nxt = attraction_function(inp, R_start)
    except DomainError as exc:
        return IterationResult(radii, None, False, None, f"attraction function undefined at {R_start}: {exc}")
    if nxt >= R_start:
        grid = np.linspace(R_start, 0.0, 257)[:-1]
        below = []
        for s in grid:
            try:
                below.append(attraction_function(inp, float(s)) < s)
            except DomainError:
                below.append(False)
        msg = "no decay at the starting radius"
        if not any(below):
            msg += "; no root below R"
        return IterationResult(radii + [nxt], None, False, None, msg)
    radii.append(nxt)
    for _ in range(max_iter):
        prev = radii[-1]
        nxt = attraction_function(inp, prev)
        if nxt > prev:
            return IterationResult(radii + [nxt], None, False, None, "iteration increased")
        radii.append(nxt)
        if abs(prev - nxt) < tol:
            r_star = nxt
            residual = abs(attraction_function(inp, r_star) - r_star)
            return IterationResult(radii, r_star, True, residual)
    r_star = radii[-1]
    return IterationResult(radii, r_star, False, abs(attraction_function(inp, r_star) - r_star),
                           f"no convergence within {max_iter} iterations")


def fixed_point_bisection(inp: CertificateInputs, lo: float, hi: float, tol: float = 1e-12) -> float:
    """Largest root of ``r~(r) - r`` in [lo, hi], assuming ``r~(hi) < hi`` and ``r~(lo) >= lo``."""
    g = lambda r: attraction_function(inp, r) - r
    if g(hi) >= 0 or g(lo) < 0:
        raise InputError("bisection bracket does not straddle a root")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@dataclass
class A4Result:
    holds: bool
    witness: int
    R_star: float
    iterates: list
    diagnostic: str = ""


def check_A4(inp: CertificateInputs, R: float | None = None, max_i: int = 1000) -> A4Result:
    """Basin check: first i with ``y(r~^i(R*); delta) <= R``, where ``R* = alpha1^-1(alpha2(R))``."""
    R = inp.R if R is None else R
    R_star = inp.alpha1.inverse(inp.alpha2(R))
    iterates = []
    r = R_star
    try:
        for i in range(1, max_i + 1):
            r_next = attraction_function(inp, r)
            iterates.append(r_next)
            if inp.forecast(r_next) <= R:
                return A4Result(True, i, R_star, iterates)
            if r_next >= r:
                return A4Result(False, 0, R_star, iterates, "attraction function does not decrease from R*")
            r = r_next
    except DomainError as exc:
        return A4Result(False, 0, R_star, iterates, f"forecast or bounds undefined: {exc}")
    return A4Result(False, 0, R_star, iterates, f"no witness within {max_i} iterations")


def lam_alphas(inp: CertificateInputs) -> tuple[InfConvolvedKappa, InfConvolvedKappa]:
    return InfConvolvedKappa(inp.alpha1, inp.lam), InfConvolvedKappa(inp.alpha2, inp.lam)


def probability_radius(inp: CertificateInputs, r_star: float) -> float:
    """``lam_alpha1^-1(lam_alpha2(y(r*; delta)))`` with the scalar inf-convolutions."""
    a1, a2 = lam_alphas(inp)
    return a1.inverse(a2(inp.forecast(r_star)))


@dataclass
class EnvelopeValue:
    value: float
    extrapolated: bool


def mean_attraction_function(inp: CertificateInputs, r: float, detail: bool = False):
    """Mean attraction radius r^(r) with the noise moment bounds of the bound set."""
    if r <= 0:
        raise DomainError("mean attraction function needs r > 0")
    b = inp.bounds
    lam, delta = inp.lam, inp.delta
    root = math.sqrt(2.0 * inp.alpha2(r))
    w = r + lam * root
    fr, sr, lfr = b.f_bar(r), b.sigma_bar(r), b.lip_f(r)
    bracket = (2.0 * lam * b.lip_L(w) * b.lip_f(w)
               + delta / (2.0 * lam) * lfr * (fr + sr * b.mu_bar)
               + sr * b.mu_bar / lam)
    arg = (inp.eta + root * bracket
           + 2.0 * delta / lam**2 * ((fr + sr * b.z_bar) ** 2 + b.sigma_tilde**2 * sr**2))
    env = envelope_of(inp.alpha3, r, "lower-convex", ENVELOPE_GRID)
    s = env.inverse(arg)
    out = EnvelopeValue(s + lam * root, env.extrapolates(s))
    return out if detail else out.value


def mean_radius(inp: CertificateInputs, r: float, detail: bool = False):
    """``lam_alpha1_convex^-1(lam_alpha2_concave(r^(r) + (f_bar(r) + sigma_bar(r) mu_bar) delta))``.

    Envelopes are built on [0, r]; arguments beyond r use the terminal
    linear pieces and are flagged as extrapolated.
    """
    b = inp.bounds
    a1, a2 = lam_alphas(inp)
    r_hat = mean_attraction_function(inp, r, detail=True)
    arg = r_hat.value + (b.f_bar(r) + b.sigma_bar(r) * b.mu_bar) * inp.delta
    low1 = envelope_of(a1, r, "lower-convex", ENVELOPE_GRID)
    up2 = envelope_of(a2, r, "upper-concave", ENVELOPE_GRID)
    s = low1.inverse(up2(arg))
    extrapolated = r_hat.extrapolated or up2.extrapolates(arg) or low1.extrapolates(s)
    out = EnvelopeValue(s, extrapolated)
    return out if detail else out.value


@dataclass
class CertificateReport:
    inputs: dict
    rho: list
    r_l: list
    r_star: float | None
    fixed_point_residual: float | None
    a4_holds: bool
    witness_i: int
    R_star: float
    r: float | None
    r_hat_at_r: float | None
    r_bar: float | None
    empirical_bounds: bool
    extrapolated: bool = False
    diagnostics: list = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return self.a4_holds and self.r_star is not None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["certified"] = self.certified
        d["label"] = "empirical" if self.empirical_bounds else "analytic"
        return d


def certify(inp: CertificateInputs, tol: float = 1e-9, max_iter: int = 10_000, max_i: int = 1000) -> CertificateReport:
    """Run the whole certificate chain for one set of inputs."""
    diagnostics = []
    inputs = {
        "lambda": inp.lam, "delta": inp.delta, "eta": inp.eta, "R": inp.R,
        "alpha1": inp.alpha1.to_config(), "alpha2": inp.alpha2.to_config(), "alpha3": inp.alpha3.to_config(),
        "bounds": inp.bounds.to_config(),
    }
    rho_knots = inp.rho.knots()
    try:
        inp.check_delta()
    except DomainError as exc:
        diagnostics.append(str(exc))
        return CertificateReport(inputs, rho_knots, [], None, None, False, 0, float("nan"), None, None, None,
                                 inp.bounds.empirical, False, diagnostics)
    a4 = check_A4(inp, inp.R, max_i)
    if a4.diagnostic:
        diagnostics.append("A4: " + a4.diagnostic)
    it = iterate_attraction(inp, inp.R, tol, max_iter)
    if it.diagnostic:
        diagnostics.append("C1: " + it.diagnostic)
    r = r_hat = r_bar = None
    extrapolated = False
    if it.r_star is not None:
        try:
            r = probability_radius(inp, it.r_star)
            rh = mean_attraction_function(inp, r, detail=True)
            rb = mean_radius(inp, r, detail=True)
            r_hat, r_bar = rh.value, rb.value
            extrapolated = rh.extrapolated or rb.extrapolated
        except DomainError as exc:
            diagnostics.append(f"radii: {exc}")
    return CertificateReport(
        inputs=inputs, rho=rho_knots, r_l=it.radii, r_star=it.r_star, fixed_point_residual=it.residual,
        a4_holds=a4.holds, witness_i=a4.witness, R_star=a4.R_star, r=r, r_hat_at_r=r_hat, r_bar=r_bar,
        empirical_bounds=inp.bounds.empirical, extrapolated=extrapolated, diagnostics=diagnostics,
    )
