"""Command line: ``holdstab certify|simulate|verify|sweep <config.json> ...``.

Exit codes: 0 pass, 1 usage or configuration error, 2 certified but
empirically violated, 3 not certified.  ``HOLDSTAB_WORKERS`` sets the
number of worker processes for Monte Carlo runs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import HoldStabError
from .harness import emit_report, load_config, run_certificate, simulate, sweep, verify_stability, write_sweep_files

EXIT_PASS, EXIT_ERROR, EXIT_VIOLATED, EXIT_NOT_CERTIFIED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _table(rows) -> str:
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def _num(v) -> str:
    return "-" if v is None else f"{v:.6g}"


def cmd_certify(args) -> int:
    cfg = load_config(args.config)
    report = run_certificate(cfg)
    out = args.out or Path(cfg.output_dir) / "certificate.json"
    emit_report(report, out)
    print(_table([
        ("certified", report.certified), ("bounds", "empirical" if report.empirical_bounds else "analytic"),
        ("R", _num(cfg.R)), ("R*", _num(report.R_star)), ("A4 witness", report.witness_i),
        ("r*", _num(report.r_star)), ("r", _num(report.r)), ("r_hat(r)", _num(report.r_hat_at_r)),
        ("r_bar", _num(report.r_bar)), ("extrapolated", report.extrapolated), ("report", out),
    ]))
    for d in report.diagnostics:
        print(f"note: {d}")
    return EXIT_PASS if report.certified else EXIT_NOT_CERTIFIED


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    x0 = _floats(args.x0) if args.x0 else None
    traj = simulate(cfg, seed=args.seed, x0=x0, out=args.out)
    print(_table([("nodes", traj.states.shape[0]), ("final |x|", _num(float(traj.norms()[-1]))),
                  ("csv", args.out)]))
    return EXIT_PASS


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    report = verify_stability(cfg, trials=args.trials)
    out = args.out or Path(cfg.output_dir) / "verification.json"
    emit_report(report, out)
    low, high = report.wilson
    print(_table([
        ("verdicts", ", ".join(report.verdicts)), ("r", _num(report.r)), ("r_bar", _num(report.r_bar)),
        ("P(tail sup <= r)", f"{report.probability:.4f} [{low:.4f}, {high:.4f}]"),
        ("tail mean", _num(report.tail_mean)), ("report", out),
    ]))
    return report.exit_code


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    result = sweep(cfg, _floats(args.deltas), _floats(args.noise_powers), args.trials)
    out_dir = Path(args.out_dir or Path(cfg.output_dir) / "sweep")
    emit_report(result, out_dir / "sweep.json")
    paths = write_sweep_files(result, out_dir)
    for p, t in result["trends"].items():
        print(f"noise {p}: spearman {t['spearman']:.3f}, ratio at two smallest delta {t['smallest_ratio']:.3f}")
    for c in result["cells"]:
        if c.get("error"):
            print(f"cell delta={c['delta']} noise={c['noise_power']}: {c['error']}")
    print(f"wrote {paths['matrix']}, {paths['cells']}, {paths['gnuplot']}")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="holdstab", description="Sample-and-hold stabilization certificates and Monte Carlo checks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("certify", help="compute the certificate and write its JSON report")
    c.add_argument("config")
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    s = sub.add_parser("simulate", help="run one closed loop and export the trajectory as CSV")
    s.add_argument("config")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--x0", help="initial state, comma separated (default R e1)")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="Monte Carlo check of the certified radii")
    v.add_argument("config")
    v.add_argument("--trials", type=int, default=None)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    w = sub.add_parser("sweep", help="Monte Carlo statistics on a delta x noise-power grid")
    w.add_argument("config")
    w.add_argument("--deltas", required=True, help="comma or space separated")
    w.add_argument("--noise-powers", required=True, help="comma or space separated")
    w.add_argument("--trials", type=int, default=16)
    w.add_argument("--out-dir")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (HoldStabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
