"""Command-line driver: ``adal {solve,certify,oracle,dmpc,generate,replay}``.

Exit codes: 0 success or converged, 1 error, 2 iteration budget exhausted.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .certification import CertificationError, certify
from .dmpc import ControllerConfig, load_mpc, receding_horizon
from .engine import AdalConfig, run
from .generate import GeneratorSpec, generate
from .io import ProblemFormatError, dumps_problem, load_problem
from .local_solver import InnerSolverError
from .messaging import LocalityViolation, ReplayMismatch, simulate_messaging
from .oracle import OracleError, solve_centralized
from .problem import max_degree, prepare

EXIT_OK, EXIT_ERROR, EXIT_BUDGET = 0, 1, 2


def _write(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load(path):
    try:
        return prepare(load_problem(path))
    except OSError as exc:
        raise ProblemFormatError(f"cannot read {path}: {exc.strerror}") from exc


def _trace_text(trace, fmt):
    if fmt == "json":
        doc = {"columns": trace.columns, "records": trace.records, "summary": trace.summary()}
        return json.dumps(doc, indent=1, sort_keys=True, default=float) + "\n"
    return trace.to_csv()


def _adal_config(args, problem, **extra):
    return AdalConfig.for_problem(
        problem, rho=args.rho, tau=args.tau, max_iters=args.max_iters, eps=args.eps,
        inner_tol=args.inner_tol, stop_tol=args.stop_tol, init_dual=args.init_dual,
        stop_on_ergodic=args.stop_on_ergodic, threads=args.threads, **extra)


def cmd_solve(args) -> int:
    problem = _load(args.problem)
    config = _adal_config(args, problem)
    oracle = solve_centralized(problem) if args.with_oracle else None
    probes = []
    if oracle is not None and args.random_probes:
        rng = np.random.default_rng(args.seed)
        probes = [rng.normal(size=problem.m) for _ in range(args.random_probes)]
    state, trace = run(problem, config, probes=probes, oracle=oracle)
    if args.trace:
        _write(args.trace, _trace_text(trace, args.format))
    summary = trace.summary_json()
    if args.summary:
        _write(args.summary, summary)
    else:
        sys.stdout.write(summary)
    return EXIT_BUDGET if trace.stop_reason == "max_iters" else EXIT_OK


def cmd_certify(args) -> int:
    problem = _load(args.problem)
    rep = certify(problem, args.eps, args.tau)
    _write(args.output, rep.to_table() if args.table else rep.to_json())
    return EXIT_OK


def cmd_oracle(args) -> int:
    problem = _load(args.problem)
    _write(args.output, solve_centralized(problem, tol=args.tol).to_json())
    return EXIT_OK


def cmd_dmpc(args) -> int:
    try:
        inst = load_mpc(args.instance)
    except OSError as exc:
        raise ProblemFormatError(f"cannot read {args.instance}: {exc.strerror}") from exc
    cfg = ControllerConfig(eps=args.eps, use_certified_k=not args.no_certified_k,
                           steps_applied=args.steps_applied, sim_steps=args.sim_steps,
                           max_iters=args.max_iters, penalty=args.penalty, apply_from=args.apply_from,
                           warm_start=not args.cold_start, with_oracle=not args.no_oracle,
                           threads=args.threads)
    trace = receding_horizon(inst, cfg)
    if args.format == "json":
        text = json.dumps({"steps": [{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in s.items()}
                                     for s in trace.steps], "violations": trace.violations},
                          indent=1, sort_keys=True) + "\n"
    else:
        text = trace.to_csv()
    _write(args.trace or "-", text)
    return EXIT_OK


def cmd_generate(args) -> int:
    spec = GeneratorSpec(seed=args.seed, N=args.N if args.N is not None else (2, 5),
                         n=args.n if args.n is not None else (1, 4), m=args.m if args.m is not None else (1, 6),
                         density=args.density, cond=args.cond, ball_fraction=args.ball_fraction,
                         singular_fraction=args.singular_fraction, affine_fraction=args.affine_fraction)
    _write(args.output, dumps_problem(generate(spec)))
    return EXIT_OK


def cmd_replay(args) -> int:
    problem = _load(args.problem)
    config = _adal_config(args, problem, keep_history=True, check_invariants=False)
    _, trace = run(problem, config)
    led = simulate_messaging(problem, trace.history, config)
    doc = {"iterations_replayed": led.replayed, "bitwise_identical": not led.mismatches, **led.totals()}
    _write(args.output, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--trace", help="write the iterate trace here")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--seed", type=int, default=0)

    adal = argparse.ArgumentParser(add_help=False)
    adal.add_argument("--rho", type=float, default=1.0)
    adal.add_argument("--tau", type=float, default=None, help="default 0.9/q")
    adal.add_argument("--max-iters", type=int, default=1000)
    adal.add_argument("--eps", type=float, default=1e-3)
    adal.add_argument("--inner-tol", type=float, default=1e-10)
    adal.add_argument("--stop-tol", type=float, default=1e-8)
    adal.add_argument("--init-dual", choices=("zero", "zero_bar"), default="zero")
    adal.add_argument("--stop-on-ergodic", action="store_true",
                      help="also stop once the ergodic residual is below --eps")

    p = argparse.ArgumentParser(prog="adal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common, adal], help="run ADAL on a problem file")
    s.add_argument("problem")
    s.add_argument("--summary", help="write the JSON summary here instead of stdout")
    s.add_argument("--with-oracle", action="store_true", help="trace merit values and rate bounds")
    s.add_argument("--random-probes", type=int, default=0)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("certify", parents=[common], help="a-priori penalties and iteration counts")
    s.add_argument("problem")
    s.add_argument("--eps", type=float, required=True)
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--table", action="store_true", help="human-readable table instead of JSON")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("oracle", parents=[common], help="centralized saddle point as JSON")
    s.add_argument("problem")
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("dmpc", parents=[common], help="receding-horizon closed loop")
    s.add_argument("instance")
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--sim-steps", type=int, default=20)
    s.add_argument("--steps-applied", type=int, default=1)
    s.add_argument("--max-iters", type=int, default=20000)
    s.add_argument("--penalty", choices=("rho_star_1", "rho_star_2"), default="rho_star_2")
    s.add_argument("--apply-from", choices=("ergodic", "primal"), default="ergodic")
    s.add_argument("--no-certified-k", action="store_true")
    s.add_argument("--cold-start", action="store_true")
    s.add_argument("--no-oracle", action="store_true", help="skip the per-step suboptimality solve")
    s.set_defaults(func=cmd_dmpc)

    s = sub.add_parser("generate", parents=[common], help="random feasible instance")
    s.add_argument("--N", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--m", type=int)
    s.add_argument("--density", type=float, default=0.5)
    s.add_argument("--cond", type=float, default=10.0)
    s.add_argument("--ball-fraction", type=float, default=0.3)
    s.add_argument("--singular-fraction", type=float, default=0.2)
    s.add_argument("--affine-fraction", type=float, default=0.0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("replay", parents=[common, adal], help="replay a run as message passing")
    s.add_argument("problem")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except (ProblemFormatError, ValueError, OracleError, CertificationError, InnerSolverError,
            LocalityViolation, ReplayMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
