"""Sample-and-hold closed-loop simulation.

The control is recomputed at ``t = k * delta`` and held on
``[k delta, (k+1) delta)``; the noise enters as a piecewise-constant drift
term at sub-step resolution and each interval is integrated with fixed-step
RK4 (or Euler).  Batches of trials advance in lockstep, one row per trial.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DivergenceError, InputError
from .noise import NoiseModel, NoiseStream, make_rng
from .proximal_policy import ProxConfig, moreau_prox, select_control
from .system_model import CLFSpec, ControlSystem, norm_last

DIVERGENCE_NORM = 1e9
TAIL_FRACTION = 0.2
NOISE_CHUNK = 256  # sampling intervals of noise drawn per stream refill
WORKERS_ENV = "HOLDSTAB_WORKERS"


@dataclass(frozen=True)
class SimConfig:
    delta: float = 0.01
    substeps: int = 20
    horizon: float = 20.0
    seed: int = 0
    integrator: str = "rk4"

    def __post_init__(self):
        if not self.delta > 0:
            raise InputError("delta must be positive")
        if self.substeps < 1:
            raise InputError("substeps must be >= 1")
        if self.horizon < self.delta:
            raise InputError("horizon must be at least one sampling period")
        if self.integrator not in ("rk4", "euler"):
            raise InputError(f"unknown integrator {self.integrator!r}")
        k = self.horizon / self.delta
        if abs(k - round(k)) > 1e-6 * max(1.0, k):
            raise InputError("horizon must be a whole number of sampling periods")

    @property
    def intervals(self) -> int:
        return int(round(self.horizon / self.delta))

    @property
    def dt(self) -> float:
        return self.delta / self.substeps

    @classmethod
    def from_config(cls, spec: dict) -> "SimConfig":
        delta = float(spec.get("delta", 0.01))
        horizon = spec.get("horizon")
        if horizon is None:
            horizon = default_horizon(delta)
        return cls(delta=delta, substeps=int(spec.get("substeps", 20)), horizon=float(horizon),
                   seed=int(spec.get("seed", 0)), integrator=spec.get("integrator", "rk4"))

    def to_config(self) -> dict:
        return asdict(self)


def default_horizon(delta: float, max_steps: int = 10_000) -> float:
    """``50 * delta * ceil(1 / delta)``, capped at ``max_steps`` sampling periods."""
    steps = min(50 * math.ceil(1.0 / delta), max_steps)
    return steps * delta


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    noise: np.ndarray
    L: np.ndarray
    L_lambda: np.ndarray | None
    sample_controls: np.ndarray
    decrements: np.ndarray
    eta_reported: np.ndarray
    policy_seconds: np.ndarray
    substeps: int

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise AssertionError("time grid must be strictly increasing")
        K = self.sample_controls.shape[0]
        held = self.controls[:-1].reshape(K, self.substeps, -1)
        if np.any(held != held[:, :1, :]):
            raise AssertionError("control changed inside a sampling interval")

    @property
    def sample_states(self) -> np.ndarray:
        return self.states[:: self.substeps]

    def norms(self) -> np.ndarray:
        return norm_last(self.states)

    def to_csv(self, path) -> None:
        n, m, d = self.states.shape[1], self.controls.shape[1], self.noise.shape[1]
        header = ["t"] + [f"x{i+1}" for i in range(n)] + [f"u{i+1}" for i in range(m)] + [f"z{i+1}" for i in range(d)] + ["L", "L_lambda"]
        Ll = self.L_lambda if self.L_lambda is not None else np.full_like(self.L, np.nan)
        data = np.column_stack([self.times, self.states, self.controls, self.noise, self.L, Ll])
        np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def _rk4_step(sys, x, u, z, h):
    k1 = sys.velocity(x, u, z)
    k2 = sys.velocity(x + 0.5 * h * k1, u, z)
    k3 = sys.velocity(x + 0.5 * h * k2, u, z)
    k4 = sys.velocity(x + h * k3, u, z)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _euler_step(sys, x, u, z, h):
    return x + h * sys.velocity(x, u, z)


def integrate_interval(sys: ControlSystem, x0, u, z, dt: float, substeps: int,
                       integrator: str = "rk4", t0: float = 0.0, record: bool = False):
    """Integrate ``x' = f(x, u) + sigma(x, u) z(t)`` over ``[0, dt]`` with ``u`` held.

    ``z`` holds one noise vector per sub-step (shape ``(substeps, d)`` or
    ``(B, substeps, d)``) or is None for no noise.  With ``record`` the
    states at every sub-step node are returned as well.
    """
    if dt <= 0:
        raise InputError("dt must be positive")
    step = _rk4_step if integrator == "rk4" else _euler_step
    x = np.asarray(x0, float)
    u = np.asarray(u, float)
    h = dt / substeps
    if z is not None:
        z = np.asarray(z, float)
        if z.shape[-2] < substeps:
            raise InputError("noise segment does not cover the interval")
    nodes = [x] if record else None
    for j in range(substeps):
        zj = None if z is None else z[..., j, :]
        x = step(sys, x, u, zj, h)
        with np.errstate(over="ignore", invalid="ignore"):
            nrm = norm_last(np.atleast_1d(x) if x.ndim == 1 else x)
        if not np.all(np.isfinite(x)) or np.any(nrm > DIVERGENCE_NORM):
            raise DivergenceError("state diverged", time=t0 + (j + 1) * h)
        if record:
            nodes.append(x)
    if record:
        return x, np.stack(nodes, axis=-2)
    return x


class _NoiseFeed:
    """Per-trial noise streams refilled in chunks of whole sampling intervals."""

    def __init__(self, noise: NoiseModel, sim: SimConfig, seed: int, indices):
        self.zero = noise.is_zero
        self.d = noise.dim
        self.substeps = sim.substeps
        self.streams = [] if self.zero else [NoiseStream(noise, sim.dt, seed, int(i)) for i in indices]
        self.B = len(indices)
        self.buf = None
        self.pos = 0

    def next(self, count: int = 1):
        """Noise for the next interval, shape (B, count, d), or None when zero."""
        if self.zero:
            return None
        if self.buf is None or self.pos + count > self.buf.shape[1]:
            rest = None if self.buf is None else self.buf[:, self.pos:]
            fresh = np.stack([s.take(NOISE_CHUNK * self.substeps) for s in self.streams])
            self.buf = fresh if rest is None else np.concatenate([rest, fresh], axis=1)
            self.pos = 0
        out = self.buf[:, self.pos:self.pos + count]
        self.pos += count
        return out


@dataclass(frozen=True)
class TrialSummary:
    index: int
    x0: tuple
    diverged: bool
    divergence_time: float | None
    tail_sup: float
    tail_mean: float
    final_norm: float
    min_L_lambda: float
    max_L_lambda: float
    max_eta_reported: float

    def to_dict(self) -> dict:
        return asdict(self)


def _run_batch(sys, clf, noise, prox, sim, X0, indices, seed, record=False):
    """Lockstep simulation of a batch; returns summaries and, with ``record``, full node arrays."""
    X = np.array(X0, float)
    B = X.shape[0]
    K = sim.intervals
    S = sim.substeps
    h = sim.dt
    feed = _NoiseFeed(noise, sim, seed, indices)
    step = _rk4_step if sim.integrator == "rk4" else _euler_step
    tail_start = int(math.floor((1.0 - TAIL_FRACTION) * K * S))
    alive = np.ones(B, bool)
    div_time = np.full(B, np.nan)
    tail_sup = np.zeros(B)
    tail_sum = np.zeros(B)
    tail_count = 0
    min_ll = np.full(B, np.inf)
    max_ll = np.full(B, -np.inf)
    max_eta = np.zeros(B)
    if record:
        states = np.empty((K * S + 1, B, sys.n))
        controls = np.empty((K * S + 1, B, sys.m))
        zs = np.zeros((K * S + 1, B, sys.d))
        sample_u = np.empty((K, B, sys.m))
        decs = np.empty((K, B))
        etas = np.empty((K, B))
        secs = np.empty(K)
        states[0] = X

    def account(node, Xn):
        nonlocal tail_count
        if node >= tail_start:
            nr = norm_last(Xn)
            tail_sup[:] = np.where(alive, np.maximum(tail_sup, nr), tail_sup)
            tail_sum[:] = np.where(alive, tail_sum + nr, tail_sum)
            tail_count += 1

    account(0, X)
    for k in range(K):
        t_start = time.perf_counter()
        choice = select_control(sys, clf, X, prox)
        elapsed = time.perf_counter() - t_start
        U = choice.control
        min_ll = np.where(alive, np.minimum(min_ll, choice.prox.value), min_ll)
        max_ll = np.where(alive, np.maximum(max_ll, choice.prox.value), max_ll)
        max_eta = np.where(alive, np.maximum(max_eta, choice.eta_reported), max_eta)
        Z = feed.next(S)
        if record:
            sample_u[k], decs[k], etas[k], secs[k] = U, choice.decrement, choice.eta_reported, elapsed
        for j in range(S):
            node = k * S + j
            zj = None if Z is None else Z[:, j, :]
            if record:
                controls[node] = U
                if zj is not None:
                    zs[node] = zj
            Xn = step(sys, X, U, zj, h)
            with np.errstate(over="ignore", invalid="ignore"):
                bad = ~np.all(np.isfinite(Xn), axis=-1) | (norm_last(np.where(np.isfinite(Xn), Xn, 0.0)) > DIVERGENCE_NORM)
            newly = bad & alive
            if np.any(newly):
                div_time[newly] = (node + 1) * h
                alive &= ~bad
            # frozen rows keep their last finite state so the batch stays finite
            X = np.where(alive[:, None], Xn, X)
            account(node + 1, X)
            if record:
                states[node + 1] = X
    if record:
        controls[K * S] = controls[K * S - 1]
        if Z is not None:
            zs[K * S] = feed.next(1)[:, 0, :]

    finals = norm_last(X)
    summaries = []
    for b, idx in enumerate(indices):
        diverged = not alive[b]
        summaries.append(TrialSummary(
            index=int(idx),
            x0=tuple(float(v) for v in np.asarray(X0)[b]),
            diverged=bool(diverged),
            divergence_time=None if not diverged else float(div_time[b]),
            tail_sup=float(np.inf if diverged else tail_sup[b]),
            tail_mean=float(np.inf if diverged else tail_sum[b] / max(tail_count, 1)),
            final_norm=float(np.inf if diverged else finals[b]),
            min_L_lambda=float(min_ll[b]),
            max_L_lambda=float(max_ll[b]),
            max_eta_reported=float(max_eta[b]),
        ))
    if not record:
        return summaries, None
    arrays = dict(states=states, controls=controls, noise=zs, sample_controls=sample_u,
                  decrements=decs, eta=etas, seconds=secs, div_time=div_time, alive=alive)
    return summaries, arrays


def run_closed_loop(sys: ControlSystem, clf: CLFSpec, noise: NoiseModel, prox: ProxConfig, sim: SimConfig,
                    x0, seed: int | None = None, index: int = 0, record_lambda: bool = True) -> Trajectory:
    """One closed-loop run; the noise path comes from stream ``index`` of ``seed``.

    Raises DivergenceError if the state blows up.
    """
    seed = sim.seed if seed is None else seed
    x0 = np.asarray(x0, float).reshape(1, -1)
    summaries, arr = _run_batch(sys, clf, noise, prox, sim, x0, [index], seed, record=True)
    if not arr["alive"][0]:
        raise DivergenceError("closed loop diverged", time=float(arr["div_time"][0]))
    states = arr["states"][:, 0, :]
    L = np.asarray(clf.L(states), float)
    L_lam = moreau_prox(clf, states, prox).value if record_lambda else None
    times = np.arange(states.shape[0]) * sim.dt
    return Trajectory(
        times=times, states=states, controls=arr["controls"][:, 0, :], noise=arr["noise"][:, 0, :],
        L=L, L_lambda=L_lam, sample_controls=arr["sample_controls"][:, 0, :],
        decrements=arr["decrements"][:, 0], eta_reported=arr["eta"][:, 0],
        policy_seconds=arr["seconds"], substeps=sim.substeps,
    )


def simulate_batch(sys: ControlSystem, clf: CLFSpec, noise: NoiseModel, prox: ProxConfig, sim: SimConfig,
                   X0, indices=None, seed: int | None = None) -> tuple[np.ndarray, np.ndarray, list[TrialSummary]]:
    """Lockstep runs from the rows of ``X0``; returns node times, states ``(nodes, B, n)`` and summaries.

    Diverged rows are frozen at their last finite state (see the summaries).
    """
    X0 = np.atleast_2d(np.asarray(X0, float))
    indices = list(range(X0.shape[0])) if indices is None else list(indices)
    seed = sim.seed if seed is None else seed
    summaries, arr = _run_batch(sys, clf, noise, prox, sim, X0, indices, seed, record=True)
    times = np.arange(arr["states"].shape[0]) * sim.dt
    return times, arr["states"], summaries


def summarize(traj: Trajectory, index: int = 0) -> TrialSummary:
    """Summary of a recorded trajectory, matching what the batch runner computes."""
    nr = traj.norms()
    K = traj.sample_controls.shape[0]
    tail_start = int(math.floor((1.0 - TAIL_FRACTION) * K * traj.substeps))
    tail = nr[tail_start:]
    tail_sum = np.zeros(())
    for v in tail:
        tail_sum = tail_sum + v
    return TrialSummary(index=index, x0=tuple(float(v) for v in traj.states[0]), diverged=False,
                        divergence_time=None, tail_sup=float(tail.max()), tail_mean=float(tail_sum / tail.size),
                        final_norm=float(nr[-1]), min_L_lambda=float("nan"), max_L_lambda=float("nan"),
                        max_eta_reported=float(traj.eta_reported.max()))


@dataclass(frozen=True)
class InitialStates:
    """``fixed`` (a given x0), ``sphere`` (uniform on |x| = R) or ``ball`` (uniform in B_R)."""

    kind: str = "fixed"
    x0: tuple = ()
    radius: float = 1.0

    def draw(self, n: int, seed: int, index: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.asarray(self.x0, float)
        rng = make_rng(seed, index, 1)
        g = rng.standard_normal(n)
        g /= np.sqrt(np.sum(g * g))
        if self.kind == "sphere":
            return self.radius * g
        if self.kind == "ball":
            return self.radius * rng.random() ** (1.0 / n) * g
        raise InputError(f"unknown initial-state sampler {self.kind!r}")


_JOB = None


def _chunk_worker(bounds):
    sys, clf, noise, prox, sim, sampler, seed = _JOB
    lo, hi = bounds
    idx = list(range(lo, hi))
    X0 = np.stack([sampler.draw(sys.n, seed, i) for i in idx])
    return _run_batch(sys, clf, noise, prox, sim, X0, idx, seed)[0]


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def run_monte_carlo(sys: ControlSystem, clf: CLFSpec, noise: NoiseModel, prox: ProxConfig, sim: SimConfig,
                    sampler: InitialStates, trials: int, workers: int | None = None,
                    batch_size: int = 512) -> list[TrialSummary]:
    """Independent closed loops with per-trial streams split off ``sim.seed``.

    Trials are cut into contiguous index chunks, optionally spread over
    forked worker processes; the result is ordered by trial index and does
    not depend on the worker count.
    """
    global _JOB
    if trials < 1:
        raise InputError("need at least one trial")
    workers = worker_count(workers)
    per = max(1, min(batch_size, math.ceil(trials / workers)))
    chunks = [(lo, min(lo + per, trials)) for lo in range(0, trials, per)]
    _JOB = (sys, clf, noise, prox, sim, sampler, sim.seed)
    try:
        if workers == 1 or len(chunks) == 1:
            parts = [_chunk_worker(c) for c in chunks]
        else:
            with mp.get_context("fork").Pool(min(workers, len(chunks))) as pool:
                parts = pool.map(_chunk_worker, chunks)
    finally:
        _JOB = None
    return [s for part in parts for s in part]
