"""Experiment configs, Monte Carlo verification against certificates, sweeps and reports.

A config is a JSON document with one section per module (``system``,
``noise``, ``bounds``, ``moments``, ``policy``, ``sim``, ``certificate``,
``verify``) plus a ``version`` string.  Reports are canonical JSON: sorted
keys, floats rounded to 12 significant digits, so equal inputs give
byte-identical files.  Wall-clock data goes to a separate side file.
"""

from __future__ import annotations

import csv
import importlib
import json
import math
import os
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import binomtest, spearmanr

from .certificates import CertificateInputs, CertificateReport, certify
from .errors import ConfigError, HoldStabError
from .noise import NoiseModel, noise_moments
from .proximal_policy import ProxConfig
from .simulator import TAIL_FRACTION, InitialStates, SimConfig, TrialSummary, run_closed_loop, run_monte_carlo
from .system_model import (
    BoundsSet,
    CLFSpec,
    ControlSystem,
    builtin_nonholonomic,
    estimate_bounds,
    nonholonomic_bounds,
)

CONFIG_VERSION = "1"
REPORT_VERSION = "holdstab-report/1"
FLOAT_DIGITS = 12
SECTIONS = ("version", "system", "noise", "bounds", "moments", "policy", "sim", "certificate", "verify", "output_dir")

# name -> factory(params) returning (ControlSystem, CLFSpec) or (ControlSystem, CLFSpec, BoundsSet)
SYSTEMS: dict[str, Callable] = {}


def register_system(name: str):
    """Decorator registering an external system factory under ``name``."""
    def deco(factory):
        SYSTEMS[name] = factory
        return factory
    return deco


@dataclass(frozen=True)
class ExperimentConfig:
    version: str
    system: dict
    noise: NoiseModel
    bounds: dict
    moments: dict
    policy: ProxConfig
    sim: SimConfig
    certificate: dict
    verify: dict
    output_dir: str = "holdstab-out"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if "version" not in raw:
            raise ConfigError("config needs a version field")
        if str(raw["version"]) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {raw['version']!r}; expected {CONFIG_VERSION!r}")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        system = dict(raw.get("system", {"kind": "builtin-nonholonomic"}))
        if system.get("kind") not in ("builtin-nonholonomic", "external"):
            raise ConfigError(f"unknown system kind {system.get('kind')!r}")
        bounds = dict(raw.get("bounds", {"source": "analytic"}))
        if bounds.get("source") not in ("analytic", "empirical", "config"):
            raise ConfigError(f"unknown bounds source {bounds.get('source')!r}")
        certificate = dict(raw.get("certificate", {}))
        if not float(certificate.get("R", 1.0)) > 0:
            raise ConfigError("certificate.R must be positive")
        verify = dict(raw.get("verify", {}))
        if verify.get("initial", "sphere") not in ("sphere", "ball"):
            raise ConfigError("verify.initial must be 'sphere' or 'ball'")
        if not 0 < float(verify.get("threshold", 0.99)) <= 1:
            raise ConfigError("verify.threshold must lie in (0, 1]")
        try:
            noise = NoiseModel.from_config(raw.get("noise", {"sigma2": 0.0}))
            policy = ProxConfig.from_config(raw.get("policy", {}))
            sim = SimConfig.from_config(raw.get("sim", {}))
        except HoldStabError as exc:
            raise ConfigError(str(exc)) from None
        return cls(
            version=str(raw["version"]), system=system, noise=noise, bounds=bounds,
            moments=dict(raw.get("moments", {})), policy=policy, sim=sim, certificate=certificate,
            verify=verify, output_dir=str(raw.get("output_dir", "holdstab-out")),
        )

    def to_dict(self) -> dict:
        return {
            "version": self.version, "system": self.system, "noise": self.noise.to_config(),
            "bounds": self.bounds, "moments": self.moments, "policy": self.policy.to_config(),
            "sim": self.sim.to_config(), "certificate": self.certificate, "verify": self.verify,
            "output_dir": self.output_dir,
        }

    @property
    def R(self) -> float:
        return float(self.certificate.get("R", 1.0))

    @property
    def noise_power(self) -> float:
        return float(self.system.get("noise_power", 0.0))

    def with_cell(self, delta: float, noise_power: float) -> "ExperimentConfig":
        """Copy with a new sampling period and noise power; the horizon is kept fixed."""
        sim = SimConfig.from_config(dict(self.sim.to_config(), delta=float(delta)))
        return replace(self, system=dict(self.system, noise_power=float(noise_power)), sim=sim)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)


@lru_cache(maxsize=16)
def _builtin(noise_power: float, noise_dim: int, decay_exponent: float, calibration_radius: float, seed: int):
    return builtin_nonholonomic(noise_power, noise_dim, decay_exponent, calibration_radius, seed)


def build_system(cfg: ExperimentConfig) -> tuple[ControlSystem, CLFSpec, BoundsSet | None]:
    """System, CLF and (when the source provides them) analytic bounds."""
    s = cfg.system
    if s["kind"] == "builtin-nonholonomic":
        sys, clf = _builtin(cfg.noise_power, int(s.get("noise_dim", cfg.noise.dim)),
                            float(s.get("decay_exponent", 2.0)), float(s.get("calibration_radius", 5.0)),
                            int(s.get("seed", 0)))
        if sys.d != cfg.noise.dim:
            raise ConfigError(f"system expects noise dimension {sys.d}, noise section has {cfg.noise.dim}")
        analytic = nonholonomic_bounds(cfg.noise_power, float(cfg.bounds.get("r_max", 10.0)),
                                       int(cfg.bounds.get("per_unit", 512)))
        return sys, clf, analytic
    name = s.get("name")
    factory = SYSTEMS.get(name)
    if factory is None and "factory" in s:
        module, _, attr = str(s["factory"]).partition(":")
        try:
            factory = getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot import system factory {s['factory']!r}: {exc}") from None
    if factory is None:
        raise ConfigError(f"no registered system named {name!r}")
    out = factory(dict(s.get("params", {}), noise_power=cfg.noise_power))
    if len(out) == 2:
        return out[0], out[1], None
    return out[0], out[1], out[2]


def noise_bounds(cfg: ExperimentConfig) -> tuple[float, float, float]:
    """(Z_bar, mu_bar, sigma_tilde) from the noise model and the moments section."""
    m = cfg.moments
    if "mu_bar" in m and "sigma_tilde" in m:
        return cfg.noise.z_bar, float(m["mu_bar"]), float(m["sigma_tilde"])
    substep = m.get("substep")
    if substep is None and cfg.noise.kind == "truncated-gaussian-hold":
        substep = 1.0 / cfg.noise.hold_rate
    substep = float(substep if substep is not None else cfg.noise.substep)
    horizon = float(m.get("horizon", 10 * substep))
    mu, sd = noise_moments(cfg.noise, int(m.get("trials", 1000)), horizon, int(m.get("seed", 0)), substep)
    return cfg.noise.z_bar, mu, sd


def build_bounds(cfg: ExperimentConfig, sys: ControlSystem, clf: CLFSpec, analytic: BoundsSet | None) -> BoundsSet:
    b = cfg.bounds
    source = b["source"]
    if source == "analytic":
        if analytic is None:
            raise ConfigError("bounds.source is analytic but the system provides no analytic bounds")
        base = analytic
    elif source == "config":
        base = BoundsSet.from_config(b)
    else:
        r_max = float(b.get("r_max", 10.0))
        grid = b.get("radius_grid") or list(np.linspace(r_max / 20, r_max, 20))
        base = estimate_bounds(sys, clf, grid, int(b.get("samples_per_radius", 2000)), int(b.get("seed", 0)))
    return base.with_noise(*noise_bounds(cfg))


@dataclass
class Case:
    cfg: ExperimentConfig
    sys: ControlSystem
    clf: CLFSpec
    bounds: BoundsSet
    inputs: CertificateInputs


def build_case(cfg: ExperimentConfig) -> Case:
    sys, clf, analytic = build_system(cfg)
    bounds = build_bounds(cfg, sys, clf, analytic)
    inputs = CertificateInputs(bounds, clf.alpha1, clf.alpha2, clf.alpha3, cfg.policy.lam, cfg.sim.delta,
                               cfg.policy.eta, cfg.R)
    return Case(cfg, sys, clf, bounds, inputs)


def run_certificate(cfg: ExperimentConfig, case: Case | None = None) -> CertificateReport:
    case = case or build_case(cfg)
    c = cfg.certificate
    return certify(case.inputs, float(c.get("tol", 1e-9)), int(c.get("max_iter", 10_000)), int(c.get("max_i", 1000)))


def wilson_interval(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(int(successes), int(trials)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def sampler_for(cfg: ExperimentConfig) -> InitialStates:
    return InitialStates(cfg.verify.get("initial", "sphere"), radius=cfg.R)


@dataclass
class VerificationReport:
    config: dict
    certificate: dict
    trials: list
    probability: float
    wilson: tuple
    inside: int
    tail_mean: float
    r: float | None
    r_bar: float | None
    verdicts: list
    exit_code: int
    proxies: dict
    runtime: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock stats stay in ``runtime``."""
        return {
            "version": REPORT_VERSION, "kind": "verification", "config": self.config,
            "certificate": self.certificate, "trials": self.trials, "probability": self.probability,
            "wilson95": list(self.wilson), "inside": self.inside, "tail_mean": self.tail_mean, "r": self.r,
            "r_bar": self.r_bar, "verdicts": self.verdicts, "exit_code": self.exit_code, "proxies": self.proxies,
        }


def _limits(cfg: ExperimentConfig, cert: CertificateReport) -> tuple[float | None, float | None]:
    r = cfg.certificate.get("r_override", cert.r)
    r_bar = cfg.certificate.get("r_bar_override", cert.r_bar)
    return (None if r is None else float(r)), (None if r_bar is None else float(r_bar))


def verify_stability(cfg: ExperimentConfig, trials: int | None = None, workers: int | None = None) -> VerificationReport:
    """Certificate plus Monte Carlo from the sphere (or ball) of radius R.

    Verdicts: ``not-certified`` if the certificate fails (simulations still
    run), else ``pass-probability``/``fail-probability`` (Wilson lower bound
    against the threshold) and ``pass-mean``/``fail-mean`` (average tail mean
    against r_bar).
    """
    trials = int(trials if trials is not None else cfg.verify.get("trials", 500))
    if trials < 50:
        raise ConfigError("verification needs at least 50 trials")
    t0 = time.perf_counter()
    case = build_case(cfg)
    cert = run_certificate(cfg, case)
    t1 = time.perf_counter()
    summaries = run_monte_carlo(case.sys, case.clf, cfg.noise, cfg.policy, cfg.sim, sampler_for(cfg), trials,
                                workers=workers, batch_size=int(cfg.verify.get("batch_size", 512)))
    t2 = time.perf_counter()
    r, r_bar = _limits(cfg, cert)
    threshold = float(cfg.verify.get("threshold", 0.99))
    inside = sum(1 for s in summaries if not s.diverged and r is not None and s.tail_sup <= r)
    low, high = wilson_interval(inside, trials)
    tail_sum = 0.0
    for s in summaries:
        tail_sum += s.tail_mean
    tail_mean = tail_sum / trials
    if not cert.certified or r is None:
        verdicts, code = ["not-certified"], 3
    else:
        verdicts = ["pass-probability" if low >= threshold else "fail-probability",
                    "pass-mean" if r_bar is not None and tail_mean <= r_bar else "fail-mean"]
        code = 0 if all(v.startswith("pass") for v in verdicts) else 2
    proxies = {
        "tail_fraction": TAIL_FRACTION, "horizon": cfg.sim.horizon, "delta": cfg.sim.delta,
        "threshold": threshold, "initial": cfg.verify.get("initial", "sphere"), "R": cfg.R,
        "note": "finite-horizon surrogates: tail window sup/mean of |x| stand in for limsup",
    }
    return VerificationReport(
        config=cfg.to_dict(), certificate=cert.to_dict(), trials=[s.to_dict() for s in summaries],
        probability=inside / trials, wilson=(low, high), inside=inside, tail_mean=tail_mean, r=r, r_bar=r_bar,
        verdicts=verdicts, exit_code=code, proxies=proxies,
        runtime={"certificate_seconds": t1 - t0, "simulation_seconds": t2 - t1, "trials": trials},
    )


def simulate(cfg: ExperimentConfig, seed: int | None = None, x0=None, out: str | os.PathLike | None = None):
    """One recorded closed-loop run; x0 defaults to R e_1."""
    case = build_case(cfg)
    if x0 is None:
        x0 = np.zeros(case.sys.n)
        x0[0] = cfg.R
    traj = run_closed_loop(case.sys, case.clf, cfg.noise, cfg.policy, cfg.sim, x0, seed=seed)
    if out is not None:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        traj.to_csv(path)
    return traj


# sweeps

def _cell_stats(summaries: list[TrialSummary]) -> dict:
    sup = np.array([s.tail_sup for s in summaries])
    final = np.array([s.final_norm for s in summaries])
    tail_mean = 0.0
    final_mean = 0.0
    for s in summaries:
        tail_mean += s.tail_mean
        final_mean += s.final_norm
    n = len(summaries)
    return {
        "trials": n, "diverged": int(sum(s.diverged for s in summaries)),
        "tail_sup_q50": float(np.quantile(sup, 0.5)), "tail_sup_q90": float(np.quantile(sup, 0.9)),
        "tail_sup_max": float(sup.max()), "tail_mean": tail_mean / n, "final_mean": final_mean / n,
        "final_q50": float(np.quantile(final, 0.5)),
    }


def sweep(cfg: ExperimentConfig, deltas, noise_powers, trials: int, workers: int | None = None) -> dict:
    """Monte Carlo statistics on a (delta, noise power) grid plus trend checks per noise column."""
    deltas = [float(d) for d in deltas]
    noise_powers = [float(p) for p in noise_powers]
    if not deltas or not noise_powers:
        raise ConfigError("sweep grid must be nonempty")
    cells = []
    for p in noise_powers:
        for d in deltas:
            cell = {"delta": d, "noise_power": p}
            try:
                cc = cfg.with_cell(d, p)
                case = build_case(cc)
                summaries = run_monte_carlo(case.sys, case.clf, cc.noise, cc.policy, cc.sim, sampler_for(cc), trials,
                                            workers=workers, batch_size=int(cfg.verify.get("batch_size", 512)))
                cell.update(_cell_stats(summaries), error=None)
            except HoldStabError as exc:
                cell.update(error=f"{type(exc).__name__}: {exc}")
            cells.append(cell)
    trends = {}
    for p in noise_powers:
        col = [c for c in cells if c["noise_power"] == p and c.get("error") is None]
        col.sort(key=lambda c: c["delta"])
        if len(col) >= 2:
            ds = [c["delta"] for c in col]
            err = [c["final_mean"] for c in col]
            rho = float(spearmanr(ds, err).statistic) if len(col) >= 3 else float("nan")
            trends[repr(p)] = {"spearman": rho, "smallest_ratio": err[1] / err[0] if err[0] > 0 else float("inf"),
                               "deltas": ds, "final_mean": err}
    return {"version": REPORT_VERSION, "kind": "sweep", "config": cfg.to_dict(), "deltas": deltas,
            "noise_powers": noise_powers, "trials": trials, "cells": cells, "trends": trends}


def write_sweep_files(result: dict, out_dir) -> dict:
    """CSV matrix of mean final error (rows delta, columns noise power), long CSV and gnuplot data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lookup = {(c["delta"], c["noise_power"]): c for c in result["cells"]}
    paths = {"matrix": out / "sweep_matrix.csv", "cells": out / "sweep_cells.csv", "gnuplot": out / "sweep.dat"}
    with open(paths["matrix"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta"] + [f"noise_{p:g}" for p in result["noise_powers"]])
        for d in result["deltas"]:
            w.writerow([f"{d:.12g}"] + [_fmt(lookup[(d, p)].get("final_mean")) for p in result["noise_powers"]])
    keys = ["delta", "noise_power", "trials", "diverged", "tail_sup_q50", "tail_sup_q90", "tail_sup_max",
            "tail_mean", "final_mean", "final_q50", "error"]
    with open(paths["cells"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for c in result["cells"]:
            w.writerow([_fmt(c.get(k)) for k in keys])
    with open(paths["gnuplot"], "w") as fh:
        fh.write("# delta final_mean tail_sup_q50 tail_mean; one block per noise power\n")
        for p in result["noise_powers"]:
            fh.write(f"# noise_power {p:.12g}\n")
            for d in sorted(result["deltas"]):
                c = lookup[(d, p)]
                fh.write(" ".join(_fmt(v) for v in (d, c.get("final_mean"), c.get("tail_sup_q50"), c.get("tail_mean"))))
                fh.write("\n")
            fh.write("\n\n")
    return paths


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.{FLOAT_DIGITS}g}" if math.isfinite(v) else repr(v)
    return str(v)


# canonical reports

def canonical(obj):
    """JSON-ready copy: floats to 12 significant digits, NaN to None, tuples and arrays to lists."""
    if isinstance(obj, dict):
        return {str(k): canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [canonical(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return x
        return float(f"{x:.{FLOAT_DIGITS}g}")
    return obj


def dumps_report(report) -> str:
    data = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    if "version" not in data:
        data = dict(data, version=REPORT_VERSION)
    return json.dumps(canonical(data), sort_keys=True, indent=1) + "\n"


def emit_report(report, path) -> Path:
    """Write a canonical JSON report; parent directories are created."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_report(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    runtime = getattr(report, "runtime", None)
    if runtime:
        side = path.with_name(path.stem + ".runtime.json")
        try:
            side.write_text(json.dumps(canonical(runtime), sort_keys=True, indent=1) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write runtime stats to {side}: {exc}") from exc
    return path


def read_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
