"""Moreau proximal point of a CLF and the sample-and-hold control selection.

All routines accept a single state of shape ``(n,)`` or a batch ``(B, n)``.
Rows are processed with elementwise numpy operations only, so a row's result
does not depend on which batch it was computed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError
from .system_model import CLFSpec, ControlSystem, control_grid, sum_last


@dataclass(frozen=True)
class ProxConfig:
    lam: float = 0.1
    state_grid: int = 7
    refinements: int = 3
    eta: float = 0.0
    control_grid: int = 21
    polish_iters: int = 60
    control_polish_iters: int = 30

    def __post_init__(self):
        if not self.lam > 0:
            raise InputError("lambda must be positive")
        if self.eta < 0:
            raise InputError("eta must be nonnegative")
        if self.state_grid < 3 or self.control_grid < 3:
            raise InputError("grid counts must be at least 3")
        if self.refinements < 0 or self.polish_iters < 0 or self.control_polish_iters < 0:
            raise InputError("iteration counts must be nonnegative")

    @classmethod
    def from_config(cls, spec: dict) -> "ProxConfig":
        return cls(
            lam=float(spec.get("lambda", 0.1)),
            state_grid=int(spec.get("state_grid", 7)),
            refinements=int(spec.get("refinements", 3)),
            eta=float(spec.get("eta_budget", 0.0)),
            control_grid=int(spec.get("control_grid", 21)),
            polish_iters=int(spec.get("polish_iters", 60)),
            control_polish_iters=int(spec.get("control_polish_iters", 30)),
        )

    def to_config(self) -> dict:
        return {
            "lambda": self.lam, "state_grid": self.state_grid, "refinements": self.refinements,
            "eta_budget": self.eta, "control_grid": self.control_grid,
            "polish_iters": self.polish_iters, "control_polish_iters": self.control_polish_iters,
        }


@dataclass(frozen=True)
class ProxResult:
    prox_point: np.ndarray
    value: np.ndarray
    subgradient: np.ndarray


def _offsets(n: int, k: int) -> np.ndarray:
    """k**n points of the cube [-1, 1]^n in C order (lowest index first)."""
    axis = np.linspace(-1.0, 1.0, k)
    return np.array(np.meshgrid(*[axis] * n, indexing="ij")).reshape(n, -1).T


def _objective(clf: CLFSpec, y: np.ndarray, x: np.ndarray, radius2: np.ndarray, two_lam2: float) -> np.ndarray:
    """Prox objective, +inf outside the search ball around ``x``."""
    diff = y - x
    d2 = sum_last(diff * diff)
    Ly = np.asarray(clf.L(y), float)
    if not np.all(np.isfinite(Ly)):
        raise NumericError("non-finite L value inside the prox search ball",
                           coords=np.argwhere(~np.isfinite(Ly)).tolist())
    val = Ly + d2 / two_lam2
    return np.where(d2 <= radius2, val, np.inf)


def moreau_prox(clf: CLFSpec, x, cfg: ProxConfig) -> ProxResult:
    """Minimise ``L(y) + |y - x|^2 / (2 lam^2)`` over the ball ``B(x, lam sqrt(2 L(x)))``.

    A ``state_grid``-point grid per axis on the enclosing cube is refined
    ``refinements`` times (half-width shrinks by 1/3 around the incumbent),
    then a compass search polishes the result.  Grid ties go to the lowest
    index.
    """
    x = np.asarray(x, float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    B, n = X.shape
    lam = cfg.lam
    two_lam2 = 2.0 * lam * lam
    Lx = np.asarray(clf.L(X), float)
    if not np.all(np.isfinite(Lx)):
        raise NumericError("non-finite L at the query state")
    radius2 = two_lam2 * Lx
    radius = np.sqrt(radius2)

    best = X.copy()
    best_val = Lx.copy()
    offs = _offsets(n, cfg.state_grid)
    half = radius.copy()
    Xc = X[:, None, :]
    R2c = radius2[:, None]
    for _ in range(cfg.refinements + 1):
        cand = best[:, None, :] + half[:, None, None] * offs[None, :, :]
        vals = _objective(clf, cand, Xc, R2c, two_lam2)
        i = np.argmin(vals, axis=1)
        v = vals[np.arange(B), i]
        better = v < best_val
        best = np.where(better[:, None], cand[np.arange(B), i], best)
        best_val = np.where(better, v, best_val)
        half = half / 3.0

    step = half * 3.0 / max(1, (cfg.state_grid - 1) // 2)
    dirs = np.concatenate([np.eye(n), -np.eye(n)])
    tol = 1e-12 * np.maximum(radius, 1e-300)
    for _ in range(cfg.polish_iters):
        active = step > tol
        if not np.any(active):
            break
        cand = best[:, None, :] + step[:, None, None] * dirs[None, :, :]
        vals = _objective(clf, cand, Xc, R2c, two_lam2)
        i = np.argmin(vals, axis=1)
        v = vals[np.arange(B), i]
        better = (v < best_val) & active
        best = np.where(better[:, None], cand[np.arange(B), i], best)
        best_val = np.where(better, v, best_val)
        step = np.where(better, step, step * 0.5)

    zeta = (X - best) / (lam * lam)
    # the candidate set always contains x itself, so the value never exceeds L(x)
    best_val = np.minimum(best_val, Lx)
    if single:
        return ProxResult(best[0], best_val[0], zeta[0])
    return ProxResult(best, best_val, zeta)


@dataclass(frozen=True)
class ControlChoice:
    control: np.ndarray
    decrement: np.ndarray
    grid_min: np.ndarray
    eta_reported: np.ndarray
    prox: ProxResult


def minimize_over_box(sys: ControlSystem, prox_point: np.ndarray, zeta: np.ndarray, cfg: ProxConfig):
    """Minimise ``<zeta, f(prox_point, u)>`` over the control box.

    Returns (u*, g(u*), grid minimum, eta bound).  The eta bound is the
    largest slope of g between neighbouring grid nodes times the diameter of
    a grid cell.
    """
    P = np.atleast_2d(prox_point)
    Zt = np.atleast_2d(zeta)
    B = P.shape[0]
    m = sys.m
    k = cfg.control_grid
    U = control_grid(sys, k)
    spacing = (sys.hi - sys.lo) / (k - 1)

    def g(points, controls):
        return sum_last(Zt[:, None, :] * sys.drift(points[:, None, :], controls))

    vals = g(P, U[None, :, :])
    i = np.argmin(vals, axis=1)
    grid_min = vals[np.arange(B), i]
    best = U[i]
    best_val = grid_min.copy()

    grid_vals = vals.reshape((B,) + (k,) * m)
    slope = np.zeros(B)
    for ax in range(m):
        if spacing[ax] > 0:
            dv = np.abs(np.diff(grid_vals, axis=ax + 1)).reshape(B, -1).max(axis=1) / spacing[ax]
            slope = np.maximum(slope, dv)
    eta_reported = slope * float(np.sqrt(np.sum(spacing**2)))

    dirs = np.concatenate([np.eye(m), -np.eye(m)])
    step = np.full(B, 0.5)
    for _ in range(cfg.control_polish_iters):
        cand = best[:, None, :] + step[:, None, None] * spacing[None, None, :] * dirs[None, :, :]
        cand = np.clip(cand, sys.lo, sys.hi)
        cv = g(P, cand)
        j = np.argmin(cv, axis=1)
        v = cv[np.arange(B), j]
        better = v < best_val
        best = np.where(better[:, None], cand[np.arange(B), j], best)
        best_val = np.where(better, v, best_val)
        step = np.where(better, step, step * 0.5)
    assert np.all(best_val <= grid_min), "refinement worsened the grid incumbent"
    return best, best_val, grid_min, eta_reported


def select_control(sys: ControlSystem, clf: CLFSpec, x, cfg: ProxConfig) -> ControlChoice:
    """Sample-and-hold control: minimise ``<zeta_lam(x), f(prox(x), u)>`` over the box."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    prox = moreau_prox(clf, np.atleast_2d(x), cfg)
    u, dec, gmin, eta = minimize_over_box(sys, prox.prox_point, prox.subgradient, cfg)
    if single:
        return ControlChoice(u[0], dec[0], gmin[0], eta[0],
                             ProxResult(prox.prox_point[0], prox.value[0], prox.subgradient[0]))
    return ControlChoice(u, dec, gmin, eta, prox)
