"""Control systems, control Lyapunov functions and the radius-indexed bound set.

Drift, diffusion and Lyapunov callables are batched: states have shape
``(..., n)``, controls ``(..., m)`` and the leading axes broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import minimize

from .errors import DomainError, InputError, NumericError
from .scalar_funcs import KappaFunction


def sum_last(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis column by column.

    Keeps every row's rounding independent of the batch shape, which
    ``np.sum`` does not promise.
    """
    out = a[..., 0].copy()
    for j in range(1, a.shape[-1]):
        out = out + a[..., j]
    return out


def norm_last(a: np.ndarray) -> np.ndarray:
    return np.sqrt(sum_last(a * a))


@dataclass(frozen=True)
class ControlSystem:
    """``dX = f(X, U) dt + sigma(X, U) Z dt`` with a box control set.

    ``noise_term`` may be given as a fast path for ``sigma(x, u) @ z``.
    """

    n: int
    m: int
    d: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    u_lo: tuple
    u_hi: tuple
    name: str = "external"
    noise_term: Callable | None = None
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = np.asarray(self.u_lo, float), np.asarray(self.u_hi, float)
        if lo.shape != (self.m,) or hi.shape != (self.m,) or np.any(lo > hi):
            raise InputError("control box must have m ordered bounds")
        for v in self.box_vertices():
            x0 = np.zeros(self.n)
            if not (np.all(np.isfinite(self.drift(x0, v))) and np.all(np.isfinite(self.diffusion(x0, v)))):
                raise InputError(f"f(0, u) or sigma(0, u) is not finite at vertex {v}")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.u_lo, float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.u_hi, float)

    def box_vertices(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        idx = np.array(np.meshgrid(*[[0, 1]] * self.m, indexing="ij")).reshape(self.m, -1).T
        return np.where(idx == 0, lo, hi)

    def in_box(self, u: np.ndarray, tol: float = 0.0) -> bool:
        u = np.asarray(u, float)
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))

    def sigma_z(self, x: np.ndarray, u: np.ndarray, z: np.ndarray) -> np.ndarray:
        if self.noise_term is not None:
            return self.noise_term(x, u, z)
        sig = np.asarray(self.diffusion(x, u), float)
        return sum_last(sig * np.asarray(z, float)[..., None, :])

    def velocity(self, x: np.ndarray, u: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
        """Unchecked ``f(x, u) + sigma(x, u) z``."""
        v = self.drift(x, u)
        if z is not None:
            v = v + self.sigma_z(x, u, z)
        return v


def eval_dynamics(sys: ControlSystem, x, u, z, z_bar: float | None = None) -> np.ndarray:
    x, u, z = (np.asarray(a, float) for a in (x, u, z))
    if not sys.in_box(u, tol=1e-12):
        raise InputError(f"control {u} outside the box [{sys.lo}, {sys.hi}]")
    if z_bar is not None and np.any(norm_last(np.atleast_1d(z)) > z_bar):
        raise InputError(f"noise vector {z} exceeds the bound {z_bar}")
    out = sys.velocity(x, u, z)
    bad = ~np.isfinite(out)
    if np.any(bad):
        raise NumericError("non-finite dynamics", coords=np.argwhere(bad).tolist())
    return out


@dataclass(frozen=True)
class CLFSpec:
    L: Callable[[np.ndarray], np.ndarray]
    alpha1: KappaFunction
    alpha2: KappaFunction
    alpha3: KappaFunction
    notes: Mapping = field(default_factory=dict)

    def check_sandwich(self, n: int, radius: float, samples: int = 10_000, seed: int = 0) -> dict:
        """Spot-check ``alpha1(|x|) <= L(x) <= alpha2(|x|)`` on random points of a ball."""
        rng = np.random.default_rng(seed)
        x = sample_ball(rng, samples, n, radius)
        r = norm_last(x)
        Lx = self.L(x)
        low = Lx - self.alpha1(r)
        high = self.alpha2(r) - Lx
        tol = 1e-12 * np.maximum(1.0, Lx)
        report = {
            "samples": samples,
            "radius": radius,
            "L0": float(self.L(np.zeros(n))),
            "lower_violations": int(np.sum(low < -tol)),
            "upper_violations": int(np.sum(high < -tol)),
            "worst_lower_gap": float(low.min()),
            "worst_upper_gap": float(high.min()),
        }
        report["ok"] = report["L0"] == 0.0 and report["lower_violations"] == 0 and report["upper_violations"] == 0
        return report


def sample_ball(rng: np.random.Generator, count: int, n: int, radius: float) -> np.ndarray:
    g = rng.standard_normal((count, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * radius * rng.random((count, 1)) ** (1.0 / n)


def sample_sphere(rng: np.random.Generator, count: int, n: int, radius: float) -> np.ndarray:
    g = rng.standard_normal((count, n))
    return radius * g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class RadiusFunction:
    """Nondecreasing function of a radius, tabulated on a grid.

    Evaluated by the value at the first grid point ``>= r``; for a
    nondecreasing source this never underestimates.  With ``unbounded`` the
    last value is held beyond the grid, otherwise asking past it is an error.
    """

    grid: tuple
    values: tuple
    unbounded: bool = False

    def __post_init__(self):
        g, v = np.asarray(self.grid, float), np.asarray(self.values, float)
        if g.ndim != 1 or g.shape != v.shape or g.size == 0:
            raise InputError("radius function needs matching nonempty grid and values")
        if np.any(np.diff(g) <= 0):
            raise InputError("radius grid must be strictly increasing")
        if np.any(np.diff(v) < 0):
            raise InputError("radius function must be nondecreasing")
        object.__setattr__(self, "grid", tuple(g.tolist()))
        object.__setattr__(self, "values", tuple(v.tolist()))

    @classmethod
    def constant(cls, c: float) -> "RadiusFunction":
        return cls((0.0,), (float(c),), unbounded=True)

    @classmethod
    def tabulate(cls, func: Callable, r_max: float, per_unit: int = 512) -> "RadiusFunction":
        """Tabulate a nondecreasing analytic bound on [0, r_max]."""
        n = max(2, int(np.ceil(r_max * per_unit)) + 1)
        g = np.linspace(0.0, r_max, n)
        v = np.maximum.accumulate(np.asarray(func(g), float) * np.ones_like(g))
        return cls(tuple(g.tolist()), tuple(v.tolist()))

    @classmethod
    def from_config(cls, spec) -> "RadiusFunction":
        if isinstance(spec, (int, float)):
            return cls.constant(spec)
        if "const" in spec:
            return cls.constant(spec["const"])
        if "knots" in spec:
            kn = np.asarray(spec["knots"], float)
            return cls(tuple(kn[:, 0]), tuple(kn[:, 1]), bool(spec.get("unbounded", False)))
        return cls(tuple(spec["grid"]), tuple(spec["values"]), bool(spec.get("unbounded", False)))

    def to_config(self) -> dict:
        if self.unbounded and len(self.grid) == 1:
            return {"const": self.values[0]}
        return {"grid": list(self.grid), "values": list(self.values), "unbounded": self.unbounded}

    @property
    def r_max(self) -> float:
        return np.inf if self.unbounded else self.grid[-1]

    def __call__(self, r):
        r_arr = np.asarray(r, float)
        g, v = np.asarray(self.grid), np.asarray(self.values)
        if np.any(r_arr < 0):
            raise DomainError("radius functions are defined for r >= 0")
        if not self.unbounded and np.any(r_arr > g[-1] * (1 + 1e-12)):
            raise DomainError(f"radius {float(np.max(r_arr))} exceeds tabulated range {g[-1]}", limit=g[-1])
        idx = np.minimum(np.searchsorted(g, r_arr * (1 - 1e-14), side="left"), g.size - 1)
        out = v[idx]
        return float(out) if out.ndim == 0 else out

    def interval_max(self, a: float, b: float) -> float:
        """Max over [a, b], endpoints included; conservative for the tabulated step function."""
        g, v = np.asarray(self.grid), np.asarray(self.values)
        inside = v[(g >= a) & (g <= b)]
        ends = np.array([self(a), self(b)])
        return float(max(ends.max(), inside.max() if inside.size else -np.inf))


@dataclass(frozen=True)
class BoundsSet:
    lip_f: RadiusFunction
    lip_L: RadiusFunction
    f_bar: RadiusFunction
    sigma_bar: RadiusFunction
    z_bar: float = 0.0
    mu_bar: float = 0.0
    sigma_tilde: float = 0.0
    empirical: bool = False

    def __post_init__(self):
        if not (self.z_bar >= self.mu_bar >= 0.0):
            raise InputError(f"need z_bar >= mu_bar >= 0, got {self.z_bar}, {self.mu_bar}")
        if self.sigma_tilde < 0:
            raise InputError("sigma_tilde must be nonnegative")

    def with_noise(self, z_bar: float, mu_bar: float, sigma_tilde: float) -> "BoundsSet":
        return replace(self, z_bar=float(z_bar), mu_bar=float(mu_bar), sigma_tilde=float(sigma_tilde))

    @property
    def r_max(self) -> float:
        return min(f.r_max for f in (self.lip_f, self.lip_L, self.f_bar, self.sigma_bar))

    def to_config(self) -> dict:
        return {
            "lipf": self.lip_f.to_config(),
            "lipl": self.lip_L.to_config(),
            "fbar": self.f_bar.to_config(),
            "sigmabar": self.sigma_bar.to_config(),
            "zbar": self.z_bar,
            "mubar": self.mu_bar,
            "sigmatilde": self.sigma_tilde,
            "empirical": self.empirical,
        }

    @classmethod
    def from_config(cls, spec: Mapping) -> "BoundsSet":
        return cls(
            lip_f=RadiusFunction.from_config(spec["lipf"]),
            lip_L=RadiusFunction.from_config(spec["lipl"]),
            f_bar=RadiusFunction.from_config(spec["fbar"]),
            sigma_bar=RadiusFunction.from_config(spec["sigmabar"]),
            z_bar=float(spec.get("zbar", 0.0)),
            mu_bar=float(spec.get("mubar", 0.0)),
            sigma_tilde=float(spec.get("sigmatilde", 0.0)),
            empirical=bool(spec.get("empirical", False)),
        )


def _fd_jacobian(func: Callable, x: np.ndarray, h: float) -> np.ndarray:
    """Forward-difference Jacobian columns of a batched map, shape (..., out, n)."""
    f0 = np.asarray(func(x), float)
    cols = []
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = h
        cols.append((np.asarray(func(x + e), float) - f0) / h)
    return np.stack(cols, axis=-1)


def estimate_bounds(
    sys: ControlSystem,
    clf: CLFSpec,
    radius_grid,
    samples_per_radius: int = 1000,
    seed: int = 0,
    overrides: Mapping[str, RadiusFunction] | None = None,
    z_bar: float = 0.0,
    mu_bar: float = 0.0,
    sigma_tilde: float = 0.0,
) -> BoundsSet:
    """Sampled estimates of f_bar, sigma_bar, Lip_f and Lip_L over ``B_r x box``.

    Half of the states lie on the sphere of radius r, half inside the ball;
    half of the controls are box vertices.  Running maxima make every entry
    nondecreasing.  The result is flagged as empirical unless every entry is
    overridden.
    """
    grid = np.asarray(radius_grid, float)
    if grid.ndim != 1 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise InputError("radius grid must be positive and strictly increasing")
    if samples_per_radius < 1000:
        raise InputError("need at least 1000 samples per radius")
    rng = np.random.default_rng(seed)
    k = samples_per_radius
    verts = sys.box_vertices()
    fb, sb, lf, ll = [], [], [], []
    for r in grid:
        x = np.concatenate([sample_sphere(rng, k // 2, sys.n, r), sample_ball(rng, k - k // 2, sys.n, r)])
        u = sys.lo + (sys.hi - sys.lo) * rng.random((k, sys.m))
        u[: k // 2] = verts[rng.integers(0, len(verts), k // 2)]
        fb.append(norm_last(sys.drift(x, u)).max())
        sig = np.asarray(sys.diffusion(x, u), float) * np.ones((k, 1, 1))
        sb.append(np.linalg.norm(sig, ord=2, axis=(-2, -1)).max())
        h = 1e-6 * max(1.0, r)
        inward = x * (1 - 2 * h / max(r, 1e-300))
        jac = _fd_jacobian(lambda y: sys.drift(y, u), inward, h)
        lf.append(np.linalg.norm(jac, ord=2, axis=(-2, -1)).max())
        grad = _fd_jacobian(lambda y: clf.L(y)[..., None], inward, h)[..., 0, :]
        ll.append(norm_last(grad).max())
    tab = lambda vals: RadiusFunction(tuple(np.concatenate([[0.0], grid])), tuple(np.maximum.accumulate(np.concatenate([[vals[0]], vals]))))
    entries = {"lip_f": tab(lf), "lip_L": tab(ll), "f_bar": tab(fb), "sigma_bar": tab(sb)}
    overrides = dict(overrides or {})
    entries.update(overrides)
    empirical = len(overrides) < 4
    return BoundsSet(**entries, z_bar=z_bar, mu_bar=mu_bar, sigma_tilde=sigma_tilde, empirical=empirical)


# -- the nonholonomic integrator -------------------------------------------------


def nonholonomic_drift(x, u):
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    x1, x2 = x[..., 0], x[..., 1]
    u1, u2 = u[..., 0], u[..., 1]
    third = x1 * u2 - x2 * u1
    shape = third.shape
    return np.stack([np.broadcast_to(u1, shape), np.broadcast_to(u2, shape), third], axis=-1)


def nonholonomic_clf(x):
    x = np.asarray(x, float)
    planar = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
    a = np.abs(x[..., 2])
    return planar**2 + 2.0 * a**2 - 2.0 * a * planar


def fit_quadratic_sandwich(L: Callable, n: int, samples: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Best constants with ``c1 |x|^2 <= L(x) <= c2 |x|^2`` for a degree-2 homogeneous L.

    Extremes of L on the unit sphere are found by sampling and then polished
    with Nelder-Mead; a relative margin of 1e-9 keeps the fit on the safe side.
    """
    rng = np.random.default_rng(seed)
    pts = sample_sphere(rng, samples, n, 1.0)
    vals = L(pts)
    on_sphere = lambda y: float(L(y / np.linalg.norm(y)))
    lo = minimize(on_sphere, pts[np.argmin(vals)], method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15})
    hi = minimize(lambda y: -on_sphere(y), pts[np.argmax(vals)], method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15})
    c1 = min(vals.min(), lo.fun) * (1 - 1e-9)
    c2 = max(vals.max(), -hi.fun) * (1 + 1e-9)
    return float(c1), float(c2)


def dini_decrement(sys: ControlSystem, L: Callable, x: np.ndarray, controls: np.ndarray, h: float = 1e-7) -> np.ndarray:
    """min over the given controls of the forward difference ``(L(x + h f(x, u)) - L(x)) / h``."""
    xs = np.asarray(x, float)[..., None, :]
    fu = sys.drift(xs, controls)
    d = (L(xs + h * fu) - L(xs)) / h
    return d.min(axis=-1)


def control_grid(sys: ControlSystem, per_axis: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(sys.lo, sys.hi)]
    return np.array(np.meshgrid(*axes, indexing="ij")).reshape(sys.m, -1).T


def calibrate_decay(
    sys: ControlSystem,
    L: Callable,
    radius: float,
    exponent: float = 2.0,
    samples: int = 20_000,
    control_per_axis: int = 21,
    seed: int = 0,
    min_norm: float = 1e-3,
) -> float:
    """Largest c with ``min_u D_f L(x) <= -c |x|**exponent`` on the sampled points of a ball."""
    rng = np.random.default_rng(seed)
    x = sample_ball(rng, samples, sys.n, radius)
    x = x[norm_last(x) >= min_norm]
    dec = -dini_decrement(sys, L, x, control_grid(sys, control_per_axis))
    c = float(np.min(dec / norm_last(x) ** exponent))
    if c <= 0:
        raise NumericError(f"no decay found at some sampled state (rate {c})")
    return c


def builtin_nonholonomic(
    noise_power: float = 0.0,
    noise_dim: int = 3,
    decay_exponent: float = 2.0,
    calibration_radius: float = 5.0,
    seed: int = 0,
) -> tuple[ControlSystem, CLFSpec]:
    """Nonholonomic integrator with the non-smooth CLF and controls in [-1, 1]^2.

    The diffusion is ``noise_power`` times the identity embedding of the
    noise into the leading state coordinates.  alpha1, alpha2 are fitted
    quadratics; alpha3 is ``c3 * s**decay_exponent`` with c3 calibrated from
    a dense-grid minimisation of the Dini decrement on a ball.
    """
    n, m, d = 3, 2, int(noise_dim)
    embed = np.zeros((n, d))
    k = min(n, d)
    embed[range(k), range(k)] = 1.0
    sigma = noise_power * embed

    def diffusion(x, u):
        return np.broadcast_to(sigma, np.shape(x)[:-1] + (n, d))

    def noise_term(x, u, z):
        z = np.asarray(z, float)
        out = np.zeros(np.broadcast_shapes(np.shape(x), np.shape(z)[:-1] + (n,)))
        for i in range(k):
            out[..., i] = noise_power * z[..., i]
        return out

    sys = ControlSystem(
        n=n, m=m, d=d, drift=nonholonomic_drift, diffusion=diffusion,
        u_lo=(-1.0, -1.0), u_hi=(1.0, 1.0), name="builtin-nonholonomic",
        noise_term=noise_term, params={"noise_power": noise_power, "noise_dim": d},
    )
    c1, c2 = fit_quadratic_sandwich(nonholonomic_clf, n, seed=seed)
    c3 = calibrate_decay(sys, nonholonomic_clf, calibration_radius, exponent=decay_exponent, seed=seed)
    clf = CLFSpec(
        L=nonholonomic_clf,
        alpha1=KappaFunction.power(c1, 2.0),
        alpha2=KappaFunction.power(c2, 2.0),
        alpha3=KappaFunction.power(c3, decay_exponent),
        notes={"alpha3_calibration": {"c3": c3, "exponent": decay_exponent, "radius": calibration_radius}},
    )
    return sys, clf


def nonholonomic_bounds(noise_power: float, r_max: float, per_unit: int = 512) -> BoundsSet:
    """Analytic bounds for the builtin model.

    |f| <= sqrt(2 + 2 r^2) since |x1 u2 - x2 u1| <= sqrt(2) r on the box;
    the drift Jacobian has norm <= sqrt(2); |grad L| <= 2 sqrt(5) r.
    """
    return BoundsSet(
        lip_f=RadiusFunction.constant(np.sqrt(2.0)),
        lip_L=RadiusFunction.tabulate(lambda r: 2.0 * np.sqrt(5.0) * r, r_max, per_unit),
        f_bar=RadiusFunction.tabulate(lambda r: np.sqrt(2.0 + 2.0 * r**2), r_max, per_unit),
        sigma_bar=RadiusFunction.constant(abs(noise_power)),
    )
