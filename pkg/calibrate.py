import argparse
import logging
import sys
from pathlib import Path

from src.config import load_config, thread_count
from src.experiments import METHODS, reconstruct, simulate
from src.utils import create_directory
from src.verification import VerifyContext, verify

logger = logging.getLogger("calibrate")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Arguments for LLG parameter calibration")
    parser.add_argument(
        "--log_level",
        type=str, default="INFO",
        help="Logging level (DEBUG/INFO/WARNING/ERROR)"
    )
    subparsers = parser.add_subparsers(dest="mode", required=True)

    simulate_parser = subparsers.add_parser("simulate", help="Generate synthetic measurements")
    simulate_parser.add_argument(
        "--config",
        type=str, required=True,
        help="Path to the run configuration file"
    )
    simulate_parser.add_argument(
        "--out",
        type=str, required=True,
        help="Directory for clean.csv, noisy.csv, manifest.json and the trajectory"
    )

    reconstruct_parser = subparsers.add_parser("reconstruct", help="Recover the damping parameters")
    reconstruct_parser.add_argument(
        "--config",
        type=str, required=True,
        help="Path to the run configuration file"
    )
    reconstruct_parser.add_argument(
        "--data",
        type=str, required=True,
        help="Directory written by simulate"
    )
    reconstruct_parser.add_argument(
        "--out",
        type=str, required=True,
        help="Directory for history.csv and summary.json"
    )
    reconstruct_parser.add_argument(
        "--method",
        type=str, default=None, choices=sorted(METHODS),
        help="Reconstruction method (reduced/kaczmarz/aao). Defaults to the mode in the config."
    )

    verify_parser = subparsers.add_parser("verify", help="Run the verification battery")
    verify_parser.add_argument(
        "--config",
        type=str, required=True,
        help="Path to the run configuration file"
    )
    verify_parser.add_argument(
        "--out",
        type=str, default="verify_report.json",
        help="Path of the JSON report"
    )
    verify_parser.add_argument(
        "--refine",
        type=int, default=2,
        help="Number of refinement levels for the convergence studies"
    )
    verify_parser.add_argument(
        "--check",
        type=str, action="append", default=None,
        help="Run only the named check. Can be repeated."
    )
    verify_parser.add_argument(
        "--flip_ktilde_sign",
        action="store_true",
        help="Debug: flip the sign of the adjoint observation operator"
    )

    return parser.parse_args(argv)


def run(args) -> int:
    config = load_config(args.config)

    if args.mode == "simulate":
        manifest = simulate(config, args.out)
        print(f"Noise level delta: {manifest['delta']:.6e}")
        print(f"Data written to {args.out}")
    elif args.mode == "reconstruct":
        summary = reconstruct(config, args.data, args.out, method=args.method)
        print(f"Status: {summary['status']}")
        print(f"Iterations: {summary['iterations']}")
        print(f"alpha_hat: ({summary['alpha_hat'][0]:.8f}, {summary['alpha_hat'][1]:.8f})")
        print(f"Residual: {summary['residual']:.6e}")
        print(f"Relative error: {summary['relative_error']:.4e}")
    elif args.mode == "verify":
        parent = Path(args.out).parent
        if str(parent):
            create_directory(parent)
        ctx = VerifyContext(levels=args.refine, flip_ktilde_sign=args.flip_ktilde_sign)
        report = verify(config, args.out, ctx, n_jobs=thread_count(), names=args.check)
        for check in report["checks"]:
            print(f"  {check['name']}: {'passed' if check['passed'] else 'FAILED'}")
        if not report["passed"]:
            print(f"Failed checks: {', '.join(report['failed'])}", file=sys.stderr)
            return EXIT_CHECK_FAILED
        print("All checks passed")
    else:
        raise ValueError(f"{args.mode} mode not supported")
    return EXIT_OK


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    print("Arguments:")
    for k, v in vars(args).items():
        print(f"  {k}: {v}")
    print("-" * 50)

    try:
        return run(args)
    except (ValueError, OSError, KeyError) as error:
        # configuration, validation and file errors
        logger.error("%s: %s", type(error).__name__, error)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
