"""Almost-surely bounded noise paths.

Four variants, each with independent coordinates:

* ``truncated-gaussian-hold``: i.i.d. truncated normals held on intervals
  of length ``1 / hold_rate``;
* ``dcl``, ``tsb``, ``ks``: scalar diffusions confined to (-1, 1), integrated
  by Euler-Maruyama with clamping into ``(-1 + eps_b, 1 - eps_b)``.

Randomness comes from Philox streams keyed by ``(seed, stream index)`` so
paths do not depend on how trials are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigError, InputError
from .system_model import norm_last

EPS_BOUNDARY = 1e-9
VARIANTS = ("truncated-gaussian-hold", "dcl", "tsb", "ks")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for one stream split off a master seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream])))


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "truncated-gaussian-hold"
    dim: int = 1
    # truncated-gaussian-hold
    sigma2: float = 0.0
    z_max: float = 1.0
    hold_rate: float = 100.0
    # dcl / tsb / ks
    theta: float = 1.0
    gamma: float = 0.0
    q: float = 0.0
    substep: float = 1e-3
    z0: float = 0.0

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown noise kind {self.kind!r}; expected one of {VARIANTS}")
        if self.dim < 1:
            raise ConfigError("noise dimension must be >= 1")
        if self.substep <= 0:
            raise ConfigError("noise substep must be positive")
        if self.kind == "truncated-gaussian-hold":
            if self.sigma2 < 0 or self.z_max < 0 or self.hold_rate <= 0:
                raise ConfigError("truncated-gaussian-hold needs sigma2 >= 0, z_max >= 0, hold_rate > 0")
        else:
            if self.theta <= 0:
                raise ConfigError(f"{self.kind} needs theta > 0")
            if self.kind == "dcl" and self.gamma <= -1:
                raise ConfigError("dcl needs gamma > -1")
            if self.kind == "tsb" and self.q >= 1:
                raise ConfigError("tsb needs q < 1")
            if self.kind == "ks" and self.gamma < 0:
                raise ConfigError("ks needs gamma >= 0")
            if abs(self.z0) >= 1:
                raise ConfigError("initial value must lie in (-1, 1)")

    @classmethod
    def from_config(cls, spec: dict) -> "NoiseModel":
        spec = dict(spec)
        if "sigma" in spec and "sigma2" not in spec:
            spec["sigma2"] = float(spec.pop("sigma")) ** 2
        try:
            return cls(**spec)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_config(self) -> dict:
        return asdict(self)

    @property
    def coord_bound(self) -> float:
        return self.z_max if self.kind == "truncated-gaussian-hold" else 1.0

    @property
    def z_bar(self) -> float:
        """Euclidean bound on a noise vector: coordinate bound times sqrt(dim)."""
        b = self.coord_bound
        return b if self.dim == 1 else b * math.sqrt(self.dim)

    @property
    def is_zero(self) -> bool:
        return self.kind == "truncated-gaussian-hold" and (self.sigma2 == 0.0 or self.z_max == 0.0)


def _truncated_normals(rng: np.random.Generator, shape, sigma: float, bound: float) -> np.ndarray:
    """Inverse-CDF truncated normal on [-bound, bound]; one uniform per draw."""
    if sigma == 0.0 or bound == 0.0:
        rng.random(shape)
        return np.zeros(shape)
    a = bound / sigma
    lo = ndtr(-a)
    span = ndtr(a) - lo
    u = rng.random(shape)
    z = sigma * ndtri(lo + u * span)
    return np.clip(z, -bound, bound)


class NoiseStream:
    """Sequential generator of one noise path on a uniform output grid.

    ``take(k)`` returns the next ``k`` piecewise-constant values; successive
    calls concatenate to exactly the path a single large call would give.
    """

    def __init__(self, model: NoiseModel, substep: float, seed: int, index: int = 0):
        if substep <= 0:
            raise InputError("substep must be positive")
        self.model = model
        self.dt = float(substep)
        self.rng = make_rng(seed, index)
        self.node = 0
        self._hold_index = -1
        self._hold_value = np.zeros(model.dim)
        self._state = np.full(model.dim, float(model.z0))
        self._inner_steps = 0

    def _hold_take(self, k: int) -> np.ndarray:
        m = self.model
        t = (self.node + np.arange(k)) * self.dt
        idx = np.floor(t * m.hold_rate + 1e-12).astype(np.int64)
        out = np.empty((k, m.dim))
        need = int(idx[-1])
        prev_last = self._hold_index
        if need > prev_last:
            new = _truncated_normals(self.rng, (need - prev_last, m.dim), math.sqrt(m.sigma2), m.z_max)
        else:
            new = np.empty((0, m.dim))
        # values for indices <= prev_last are the cached last held value
        old = idx <= prev_last
        out[old] = self._hold_value
        out[~old] = new[idx[~old] - prev_last - 1]
        if need > prev_last:
            self._hold_index = need
            self._hold_value = new[-1].copy()
        return out

    def _drift_diff(self, z: np.ndarray):
        m = self.model
        if m.kind == "dcl":
            return -z / m.theta, np.sqrt(np.maximum(1.0 - z * z, 0.0) / (m.theta * (m.gamma + 1.0)))
        if m.kind == "tsb":
            return -(z / (1.0 - z * z)) / m.theta, np.full_like(z, math.sqrt((1.0 - m.q) / m.theta))
        vartheta = (2.0 * m.gamma + 1.0) / (m.gamma + 1.0)
        drift = -vartheta / (math.pi * m.theta) * np.tan(0.5 * math.pi * z)
        return drift, np.full_like(z, 2.0 / (math.pi * math.sqrt(m.theta * (m.gamma + 1.0))))

    def _sde_take(self, k: int) -> np.ndarray:
        m = self.model
        h = m.substep
        lim = 1.0 - EPS_BOUNDARY
        out = np.empty((k, m.dim))
        sqrt_h = math.sqrt(h)
        for j in range(k):
            t = (self.node + j) * self.dt
            target = int(math.floor(t / h + 1e-9))
            while self._inner_steps < target:
                z = self._state
                a, b = self._drift_diff(z)
                z = z + a * h + b * sqrt_h * self.rng.standard_normal(m.dim)
                self._state = np.clip(z, -lim, lim)
                self._inner_steps += 1
            out[j] = self._state
        return out

    def take(self, k: int) -> np.ndarray:
        if k <= 0:
            return np.empty((0, self.model.dim))
        if self.model.kind == "truncated-gaussian-hold":
            out = self._hold_take(k)
        else:
            out = self._sde_take(k)
        self.node += k
        bound = self.model.coord_bound
        if np.any(np.abs(out) > bound):
            raise AssertionError("generated noise escaped its bound")
        return out


@dataclass(frozen=True)
class NoisePath:
    values: np.ndarray
    substep: float
    seed: int
    model: NoiseModel

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.shape[0]) * self.substep

    def at(self, t: float) -> np.ndarray:
        i = min(int(math.floor(t / self.substep + 1e-9)), self.values.shape[0] - 1)
        return self.values[i]


def sample_noise_path(model: NoiseModel, horizon: float, substep: float, seed: int, index: int = 0) -> NoisePath:
    """Noise values at the nodes ``0, substep, ..., horizon`` (piecewise constant to the right)."""
    if horizon <= 0 or substep <= 0:
        raise InputError("horizon and substep must be positive")
    nodes = int(round(horizon / substep)) + 1
    values = NoiseStream(model, substep, seed, index).take(nodes)
    if np.any(norm_last(values) > model.z_bar):
        raise AssertionError("noise path violates its Euclidean bound")
    values.setflags(write=False)
    return NoisePath(values, float(substep), int(seed), model)


def noise_moments(model: NoiseModel, trials: int = 1000, horizon: float = 1.0, seed: int = 0,
                  substep: float | None = None) -> tuple[float, float]:
    """Upper estimates of sup_t E|Z_t| and sup_t Std|Z_t|, inflated by three standard errors."""
    if trials < 1000:
        raise InputError("need at least 1000 trials")
    if model.is_zero:
        return 0.0, 0.0
    dt = model.substep if substep is None else substep
    norms = np.stack([norm_last(sample_noise_path(model, horizon, dt, seed, i).values) for i in range(trials)])
    mean = norms.mean(axis=0)
    std = norms.std(axis=0, ddof=1)
    se_mean = std / math.sqrt(trials)
    # standard error of the sample standard deviation, normal approximation
    se_std = std / math.sqrt(2.0 * (trials - 1))
    mu_bar = float(np.max(mean + 3.0 * se_mean))
    sigma_tilde = float(np.max(std + 3.0 * se_std))
    return min(mu_bar, model.z_bar), sigma_tilde
