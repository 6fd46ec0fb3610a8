"""
gfflab command-line entry point.

Usage examples (from project root, with PYTHONPATH=src):

    PYTHONPATH=src python -m gfflab.main density --levels 0 1 2 --R 10 --replicates 500 --seed 7

    # Config file plus overrides, four workers:
    PYTHONPATH=src python -m gfflab.main --config runs/scaling.toml --workers 4 variance-scaling

Every subcommand writes <out>/<command>.csv and <out>/<command>.json.
Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""

import argparse
import json
import sys
from typing import Any

from pydantic import ValidationError

from gfflab.core.config import get_settings
from gfflab.core.errors import UsageError
from gfflab.core.logging_config import configure_logging
from gfflab.schemas import ExperimentConfig
from gfflab.services.pipeline_service import EXIT_USAGE, run_experiment

STATUS_MARKS = {"success": "✓", "warning": "⚠️ ", "error": "✗", "skipped": "-"}


def _point(text: str) -> list[int]:
    try:
        return [int(c) for c in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


def _global_options(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps a value given before the subcommand from being reset by the subparser
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Master seed.")
    parser.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="Worker processes (env GFFLAB_WORKERS).")
    parser.add_argument("--out", default=argparse.SUPPRESS, help="Output directory.")
    parser.add_argument("--config", default=argparse.SUPPRESS, help="JSON or TOML experiment config.")
    parser.add_argument("--no-record", action="store_true", default=argparse.SUPPRESS, help="Skip the run ledger.")


def _field_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--d", type=int, help="Lattice dimension.")
    parser.add_argument("--model", choices=["gff", "iid"], help="Covariance model.")
    parser.add_argument("--levels", type=float, nargs="+", help="Levels l.")
    parser.add_argument("--level", type=float, help="Single level (shorthand for --levels).")
    parser.add_argument("--sampler", choices=["auto", "exact", "torus"], help="Field sampler.")
    parser.add_argument("--torus-margin", type=int, help="Torus side over window side.")


def _replicate_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--R", type=int, nargs="+", dest="R_grid", help="Box half-sides.")
    parser.add_argument("--replicates", "--reps", type=int, help="Replicates per box size.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfflab",
        description="Level-set cluster counts of Gaussian fields: sampling, chaos expansion and verification.",
    )
    _global_options(parser)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name: str, help_text: str, replicates: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _global_options(p)
        _field_options(p)
        if replicates:
            _replicate_options(p)
        return p

    command("sample-field", "Sample one field on Lambda_R.")
    p = command("cluster-count", "Per-replicate cluster counts.")
    p.add_argument("--truncate", type=int, help="Also count clusters of diameter <= r.")
    command("density", "Cluster density curve.")
    p = command("variance-scaling", "Var[N_R] scaling fit and envelope.")
    p.add_argument("--predict-intercept", action="store_true", default=None, help="Compare with beta mu'(l)^2.")
    p.add_argument("--kernel-R", type=int, nargs="+", help="Box sizes for the beta sum.")
    p.add_argument("--budget", type=int, help="Conditional samples for mu'(l).")
    p = command("distribution-test", "Shape of the standardized count.")
    p.add_argument("--min-replicates", type=int, help="Smallest accepted replicate count.")
    p.add_argument("--grid-N", type=int, help="Hermite-2 reference grid size.")
    p.add_argument("--reference-samples", type=int, help="Hermite-2 reference sample size.")
    p = command("arm-decay", "Truncated arm probabilities.")
    p.add_argument("--radii", type=int, nargs="+", dest="arm_radii", help="Arm radii r.")
    p.add_argument("--margin", type=int, dest="arm_margin", help="Window margin beyond the largest radius.")
    p.add_argument("--pinned", action="store_true", default=None, help="Also estimate the pinned variant.")
    p = command("pivotal-intensity", "Pivotal intensity P(y).", replicates=False)
    p.add_argument("--target", choices=["finite", "stationary", "halfspace", "truncated"])
    p.add_argument("--points", type=_point, nargs="+", help="Points as comma-separated coordinates.")
    p.add_argument("--window-R", type=int, help="Window half-side.")
    p.add_argument("--height", type=int, help="Half-space height k.")
    p.add_argument("--truncation", type=int, help="Diameter cutoff r.")
    p.add_argument("--budget", type=int, help="Conditional samples.")
    p = command("chaos-decompose", "Chaos variance decomposition on a small box.", replicates=False)
    p.add_argument("--box-shape", type=int, nargs="+", help="Rectangle side lengths.")
    p.add_argument("--order", type=int, help="Number of leading chaos terms M.")
    p.add_argument("--nodes", type=int, help="Tail quadrature nodes.")
    p.add_argument("--budget", type=int, help="Conditional samples per node.")
    p = command("constants", "Green's function values and kernel constants.", replicates=False)
    p.add_argument("--k", type=int, nargs="+", dest="kernel_k", help="Kernel powers k for beta.")
    p.add_argument("--alpha", type=float, nargs="+", dest="kernel_alpha", help="Exponents alpha for E.")
    p.add_argument("--kernel-R", type=int, nargs="+", help="Box sizes for the beta sum.")
    p.add_argument("--quadrature-nodes", type=int, help="Gauss nodes per axis.")
    p.add_argument("--green-radius", type=int, help="Largest tabulated lag of G.")
    p = command("hermite2-sample", "Order-2 Hermite reference samples.", replicates=False)
    p.add_argument("--alpha", type=float, dest="hermite_alpha", help="Covariance decay exponent.")
    p.add_argument("--grid-N", type=int, help="Frequency grid cells per axis.")
    p.add_argument("--cutoff", type=float, dest="hermite_cutoff", help="Frequency cutoff L.")
    p.add_argument("--samples", type=int, dest="hermite_samples", help="Number of samples.")
    p.add_argument("--method", choices=["auto", "spectral", "quadratic"], dest="hermite_method", help="Sampling method.")
    p.add_argument("--rank", type=int, dest="hermite_rank", help="Leading eigenvalues kept on large grids.")
    p.add_argument("--grid-table", type=int, nargs="+", dest="hermite_grid_table", help="Grid sizes for the variance table.")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """Merge --config with explicit flags; flags win."""
    skip = {"command", "config", "no_record", "level"}
    overrides: dict[str, Any] = {k: v for k, v in vars(args).items() if k not in skip and v is not None}
    if getattr(args, "level", None) is not None:
        overrides["levels"] = [args.level]
    path = getattr(args, "config", None)
    if path:
        return ExperimentConfig.from_file(path, **overrides)
    return ExperimentConfig(**overrides)


def main(argv: list[str] | None = None) -> int:
    settings = get_settings()
    configure_logging(settings.log_level)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad flags; --help exits 0
        return EXIT_USAGE if e.code else 0

    try:
        cfg = config_from_args(args)
    except ValidationError as e:
        print(f"✗ Invalid configuration:\n{e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, ValueError, UsageError) as e:
        print(f"✗ Cannot load configuration: {e}", file=sys.stderr)
        return EXIT_USAGE

    print(f"Running {args.command} (seed {cfg.seed if cfg.seed is not None else settings.seed})...")
    record = False if getattr(args, "no_record", False) else None
    result = run_experiment(args.command, cfg, record=record)
    for step in result.steps:
        print(f"  {STATUS_MARKS.get(step.status, '?')} {step.name}: {step.message}")
    for warning in result.warnings:
        print(f"  ⚠️  {warning}")
    if result.ok:
        print(f"\n✅ {args.command} complete: {result.csv_path}, {result.json_path}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
