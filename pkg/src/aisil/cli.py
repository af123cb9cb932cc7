"""Command-line entry point: ``aisil {simulate,fit,pf-variance,aggregate,check}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 engine abort,
5 harness failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .diagnostics import (ToyGridModel, aggregate_runs, kernel_invariance_harness, pf_variance_harness,
                          toy_pg_kernel)
from .engine import EngineAbort
from .factor import FactorMarginalFilter, loading_mask, simulate_factor_sv
from .io import (DataError, load_config, load_returns, load_summaries, run_experiment, write_aggregate,
                 write_matrix_csv)
from .rng import RngStream
from .ssm import ConfigError
from .sv import simulate_sv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ENGINE, EXIT_HARNESS = 0, 2, 3, 4, 5

log = logging.getLogger("aisil")

DEFAULT_FACTOR_THETA = {"mu": -1.0, "phi": 0.97, "tau2": 0.03, "phi_f": 0.98, "tau2_f": 0.02, "beta": 0.6}


def _ints(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _read_theta(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read parameters from {path}: {exc}") from exc


def _factor_theta(theta: dict, S: int, K: int) -> dict:
    """Broadcast scalar entries to per-series arrays and apply the loading pattern."""
    full = {**DEFAULT_FACTOR_THETA, **theta}
    out = {k: np.broadcast_to(np.asarray(full[k], float), (S,)).copy() for k in ("mu", "phi", "tau2")}
    out.update({k: np.broadcast_to(np.asarray(full[k], float), (K,)).copy() for k in ("phi_f", "tau2_f")})
    beta = np.broadcast_to(np.asarray(full["beta"], float), (S, K))
    out["beta"] = np.where(loading_mask(S, K), beta, 0.0)
    return out


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    theta = _read_theta(args.theta)
    rng = RngStream(args.seed).child("simulate")
    if args.model == "sv":
        th = {"mu": -0.5, "phi": 0.98, "tau2": 0.025, **theta}
        y, x = simulate_sv(th, args.T, rng)
        write_matrix_csv(out / "y.csv", ["y"], y[:, None])
        write_matrix_csv(out / "states.csv", ["x"], x[:, None])
        (out / "theta.json").write_text(json.dumps(th, indent=2, sort_keys=True))
    else:
        if not 1 <= args.K <= args.S:
            raise ConfigError("need 1 <= K <= S")
        th = _factor_theta(theta, args.S, args.K)
        y, h, lam, f = simulate_factor_sv(th, args.T, rng)
        write_matrix_csv(out / "y.csv", [f"y{s + 1}" for s in range(args.S)], y)
        hdr = [f"h{s + 1}" for s in range(args.S)] + [f"lambda{k + 1}" for k in range(args.K)] + [f"f{k + 1}" for k in range(args.K)]
        write_matrix_csv(out / "states.csv", hdr, np.vstack([h, lam, f]).T)
        (out / "theta.json").write_text(json.dumps({k: v.tolist() for k, v in th.items()}, indent=2, sort_keys=True))
    log.info("wrote simulated data to %s", out)
    return EXIT_OK


def cmd_fit(args) -> int:
    overrides = {
        "model": args.model, "n_factors": args.K, "kernel": args.kernel, "n_cloud": args.M,
        "n_particles": args.N, "n_moves": args.R, "n_leapfrog": args.L, "ess_fraction": args.ess_fraction,
        "seeds": args.seeds, "data": args.data, "mode": args.mode, "out": args.out,
    }
    cfg = load_config(args.config, overrides)
    agg = run_experiment(cfg)
    print(json.dumps({"log_evidence_mean": agg["log_evidence_mean"], "log_evidence_sd": agg["log_evidence_sd"],
                      "mean_stages": agg["mean_stages"]}, indent=2))
    return EXIT_OK


def cmd_pf_variance(args) -> int:
    y, _ = load_returns(args.data, args.mode)
    S = y.shape[1]
    theta = _factor_theta(_read_theta(args.theta), S, args.K)
    report = pf_variance_harness(lambda b: FactorMarginalFilter(y, theta, b), args.N, args.reps, args.a,
                                 RngStream(args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    for r in report.rows:
        print(f"N={r.n_particles:6d}  var={r.variance:.4f}  sec/eval={r.seconds_per_eval:.4f}  degenerate={r.n_degenerate}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    agg = aggregate_runs(load_summaries(args.runs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_aggregate(agg, out)
    print(json.dumps({k: agg[k] for k in ("n_runs", "log_evidence_mean", "log_evidence_sd", "mean_stages")}, indent=2))
    return EXIT_OK


def cmd_check(args) -> int:
    model = ToyGridModel()
    ok = True
    for a in args.a:
        good = kernel_invariance_harness(toy_pg_kernel(model), model, a, args.iterations, RngStream(args.seed).child("pg", str(a)))
        bad = kernel_invariance_harness(toy_pg_kernel(model, broken=True), model, a, args.iterations,
                                        RngStream(args.seed).child("broken", str(a)))
        control_ok = bad.pvalue < 1e-3
        print(f"a={a:g}  pg p={good.pvalue:.4f} {'PASS' if good.passed else 'FAIL'}  "
              f"negative-control p={bad.pvalue:.2e} {'PASS' if control_ok else 'FAIL'}")
        ok &= good.passed and control_ok
    return EXIT_OK if ok else EXIT_HARNESS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aisil", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="per-stage progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate SV or factor SV returns")
    s.add_argument("--model", choices=["sv", "factor"], default="sv")
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--S", type=int, default=5)
    s.add_argument("--K", type=int, default=1)
    s.add_argument("--theta", help="JSON file of parameter values (scalars broadcast across series)")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="run the tempered sampler for each seed")
    f.add_argument("--config", help="TOML run configuration")
    f.add_argument("--data")
    f.add_argument("--mode", choices=["prices", "returns"])
    f.add_argument("--model", choices=["sv", "factor"])
    f.add_argument("--kernel", choices=["pg", "hmc"])
    f.add_argument("--K", type=int)
    f.add_argument("--M", type=int, help="cloud size")
    f.add_argument("--N", type=int, help="particles per filter")
    f.add_argument("--R", type=int, help="Markov moves per stage")
    f.add_argument("--L", type=int, help="leapfrog steps")
    f.add_argument("--ess-fraction", type=float)
    f.add_argument("--seeds", type=_ints)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit)

    v = sub.add_parser("pf-variance", help="log-likelihood variance of the factor-model particle filter")
    v.add_argument("--data", required=True)
    v.add_argument("--mode", choices=["prices", "returns"], default="returns")
    v.add_argument("--theta", help="JSON file of fixed parameters")
    v.add_argument("--K", type=int, default=1)
    v.add_argument("--N", type=_ints, default=[250, 500, 1000, 2000])
    v.add_argument("--reps", type=int, default=30)
    v.add_argument("--a", type=float, default=1.0)
    v.add_argument("--seed", type=int, default=1)
    v.add_argument("--out", default="pf_variance.csv")
    v.set_defaults(func=cmd_pf_variance)

    g = sub.add_parser("aggregate", help="pool summaries of finished runs")
    g.add_argument("runs", nargs="+")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_aggregate)

    c = sub.add_parser("check", help="kernel-invariance harness on the enumerable toy model")
    c.add_argument("--iterations", type=int, default=100_000)
    c.add_argument("--a", type=float, nargs="+", default=[1.0, 0.5])
    c.add_argument("--seed", type=int, default=1)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EngineAbort as exc:
        print(f"engine aborted: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
