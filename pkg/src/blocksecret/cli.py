"""Command-line interface.

Exit codes: 0 success, 2 usage or parameter error, 3 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import codec
from .decoders import BLOCK_SOLVERS, PLAIN_SOLVERS, SolverConfig, recovery_success, solve
from .errors import DecodeError, DimensionError, ParameterError
from .experiments import OracleValidationError, load_config, run_experiment, write_outputs
from .model import derive_rng, sample_block_structure, sample_channel, sample_messages, transmit
from .moments import eavesdrop, l_crit

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def read_csv(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise CliError(f"{path} is not a numeric CSV: {exc}") from None


def write_csv(path, array) -> None:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 1:
        array = array[:, None]
    np.savetxt(path, array, delimiter=",", fmt="%.17g")


def read_vector(path) -> np.ndarray:
    data = read_csv(path)
    if 1 not in data.shape:
        raise CliError(f"{path} must hold a single vector, got shape {data.shape}")
    return data.ravel()


def read_structure(path):
    try:
        return codec.read_structure(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None


def cmd_keygen(args):
    rng = derive_rng(args.seed, "keygen")
    bs = sample_block_structure(args.n, args.d, rng)
    bits = codec.write_structure(args.out, bs)
    print(f"wrote {args.out}: N={bs.N} R={bs.R} d={bs.d}")
    print(f"payload bits: {bits} ({bs.N} x {codec.id_width(bs.R)}), header bits: {codec.HEADER_BITS}")


def cmd_channel(args):
    A = sample_channel(args.m, args.n, derive_rng(args.seed, "channel"))
    write_csv(args.out, A)
    print(f"wrote {args.out}: {args.m} x {args.n} Gaussian channel")


def cmd_encode(args):
    bs = read_structure(args.structure)
    X = sample_messages(bs, args.p, args.count, derive_rng(args.seed, "encode"))
    write_csv(args.out, X)
    grouped = X[np.argsort(bs.labels, kind="stable")].reshape(bs.R, bs.d, -1)
    active = int(np.count_nonzero(np.any(grouped != 0, axis=1)))
    print(f"wrote {args.out}: {args.count} message(s) of length {bs.N}, {active} active block(s) in total")


def cmd_transmit(args):
    A = read_csv(args.channel)
    X = read_csv(args.message)
    if X.shape[0] != A.shape[1] and X.shape[1] == A.shape[1]:
        X = X.T
    Y = transmit(A, X)
    write_csv(args.out, Y)
    print(f"wrote {args.out}: {Y.shape[1]} observation(s) of length {Y.shape[0]}")


def cmd_decode(args):
    A = read_csv(args.channel)
    y = read_vector(args.observation)
    bs = read_structure(args.structure) if args.structure else None
    if args.solver in BLOCK_SOLVERS and bs is None:
        raise CliError(f"solver {args.solver} needs --structure")
    cfg = SolverConfig(sparsity_budget=args.sparsity, max_iterations=args.max_iterations)
    res = solve(args.solver, y, A, bs, cfg)
    if args.out:
        write_csv(args.out, res.estimate)
    print(f"solver={args.solver} converged={res.converged} iterations={res.iterations_used} "
          f"residual={res.residual_norm:.3e}")
    if args.truth:
        x = read_vector(args.truth)
        print(f"success={recovery_success(x, res.estimate, args.tol)}")


def cmd_eavesdrop(args):
    A = read_csv(args.channel)
    Y = read_csv(args.snapshots)
    if Y.shape[0] != A.shape[0] and Y.shape[1] == A.shape[0]:
        Y = Y.T
    result = eavesdrop(Y, A, args.p, args.d, method=args.method, gain=args.gain,
                       decode=args.solver if args.messages_out else None,
                       max_messages=args.max_messages)
    report = result.report.to_dict()
    report.update({"snapshots": result.estimate.L, "method": args.method})
    if args.indicator_out:
        write_csv(args.indicator_out, result.estimate.B_hat)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if result.structure is not None and args.structure_out:
        codec.write_structure(args.structure_out, result.structure)
    if result.messages is not None and args.messages_out:
        write_csv(args.messages_out, result.messages)
    print(json.dumps(report, sort_keys=True))
    if not result.report.success:
        raise CliError("structure extraction failed: " + result.report.message, EXIT_RUNTIME)


def cmd_experiment(args):
    cfg = load_config(args.config)
    if args.workers is not None or args.output is not None:
        from dataclasses import replace
        cfg = replace(cfg, **{k: v for k, v in (("workers", args.workers), ("output", args.output))
                              if v is not None})
    try:
        result = run_experiment(cfg)
    except OracleValidationError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from None
    paths = write_outputs(result)
    print(f"wrote {paths['csv']} ({len(result.rows)} rows), {paths['summary']}, {paths['plot']}")


def cmd_lcrit(args):
    print(f"L_crit = {l_crit(args.n, args.m, args.d):.6g}  (N^4 ln(N)^4 / (M^4 d), natural log)")


def _positive_int(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _seed(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blocksecret", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="draw a secret block structure")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--d", type=_positive_int, required=True)
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("channel", help="draw a public Gaussian channel matrix")
    p.add_argument("--m", type=_positive_int, required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_channel)

    p = sub.add_parser("encode", help="sample block-sparse messages under a structure")
    p.add_argument("--structure", required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--count", type=_positive_int, default=1, help="number of messages (columns)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("transmit", help="apply the channel: y = A x")
    p.add_argument("--channel", required=True)
    p.add_argument("--message", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transmit)

    p = sub.add_parser("decode", help="recover a message from one observation")
    p.add_argument("--channel", required=True)
    p.add_argument("--observation", required=True)
    p.add_argument("--structure")
    p.add_argument("--solver", choices=sorted(BLOCK_SOLVERS) + sorted(PLAIN_SOLVERS), default="block_bp")
    p.add_argument("--sparsity", type=_positive_int, help="block/entry budget (IHT, optional for OMP)")
    p.add_argument("--max-iterations", type=_positive_int)
    p.add_argument("--truth", help="ground-truth message for the success verdict")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eavesdrop", help="learn the structure from many snapshots")
    p.add_argument("--snapshots", required=True, help="M x L CSV, one snapshot per column")
    p.add_argument("--channel", required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--d", type=_positive_int, required=True)
    p.add_argument("--method", choices=("exact", "isotropic"), default="exact")
    p.add_argument("--gain", type=float, default=3.0, help="scale for the isotropic method")
    p.add_argument("--indicator-out")
    p.add_argument("--structure-out")
    p.add_argument("--report")
    p.add_argument("--messages-out")
    p.add_argument("--max-messages", type=_positive_int)
    p.add_argument("--solver", choices=sorted(BLOCK_SOLVERS), default="block_omp")
    p.set_defaults(func=cmd_eavesdrop)

    p = sub.add_parser("experiment", help="run a Monte Carlo sweep from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=_positive_int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("lcrit", help="critical snapshot count")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--m", type=_positive_int, required=True)
    p.add_argument("--d", type=_positive_int, required=True)
    p.set_defaults(func=cmd_lcrit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ParameterError, DimensionError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
