import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO

import structlog

from app.core.config import Settings, get_settings
from app.core.exceptions import ConfigError, MinResError
from app.models.schemas import LearningRateStage, RunConfig
from app.services.experiment_service import experiment_service, load_config_file
from app.services.problem_service import problem_service

logger = structlog.get_logger(__name__)


def configure_logging(settings: Settings) -> None:
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, settings.log_level, logging.INFO),
    )
    renderer = (
        structlog.dev.ConsoleRenderer()
        if settings.log_format == "console"
        else structlog.processors.JSONRenderer()
    )
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            renderer,
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got '{text}'")


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got '{text}'")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--problem", help="catalogued problem name")
    parser.add_argument("--config", type=Path, help="YAML run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output-dir", type=Path)
    parser.add_argument("--threads", type=int, help="worker cap; 1 is fully deterministic")
    parser.add_argument("--test-points", type=int, help="test-grid points per axis")
    parser.add_argument("--eval-weights", choices=["raw", "ema"])


def _add_training_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--hidden-layers", type=_ints, help="e.g. 10,10,10")
    parser.add_argument("--rates", type=_floats, help="learning rates, e.g. 1e-3,1e-4,1e-5")
    parser.add_argument("--epochs", type=int, help="epochs per learning rate")
    parser.add_argument("--gamma", type=float, help="promotion threshold")
    parser.add_argument("--validation-interval", type=int)
    parser.add_argument("--epsilon0", type=float)
    parser.add_argument("--clip-norm", type=float, help="cap on the gradient norm per step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weighted-minres",
        description="Neural-network weighted minimal-residual finite elements",
    )
    parser.add_argument("--log-level", help="overrides MINRES_LOG_LEVEL")
    parser.add_argument("--log-format", choices=["json", "console"])
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train the weight network")
    _add_run_options(train)
    _add_training_options(train)
    train.add_argument("--adaptive", action=argparse.BooleanOptionalAction, default=None)
    train.add_argument("--stages", type=int, help="adaptive stages")
    train.add_argument(
        "--stage-errors",
        action="store_true",
        default=None,
        help="record the test-grid error after every stage",
    )

    evaluate = commands.add_parser("eval", help="error table on a test grid")
    _add_run_options(evaluate)
    evaluate.add_argument("--checkpoint", type=Path, required=True)

    compare = commands.add_parser(
        "compare-refinement", help="adaptive against uniform training sets"
    )
    _add_run_options(compare)
    _add_training_options(compare)
    compare.add_argument("--refinement-steps", type=int)

    dump = commands.add_parser("dump-system", help="write matrices at one parameter")
    _add_run_options(dump)
    dump.add_argument("--lambda", dest="parameter", type=_floats, required=True)
    dump.add_argument("--weights", type=_floats, help="patch coefficients, default all ones")
    dump.add_argument("--checkpoint", type=Path)

    commands.add_parser("problems", help="list the problem catalogue")
    return parser


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(getattr(args, "config", None))
    overrides: Dict[str, Any] = {
        "problem": args.problem,
        "seed": args.seed,
        "output_dir": args.output_dir,
        "threads": args.threads,
        "test_points": args.test_points,
        "eval_weights": args.eval_weights,
    }
    for name in (
        "hidden_layers",
        "gamma",
        "validation_interval",
        "epsilon0",
        "clip_norm",
        "adaptive",
        "stages",
        "stage_errors",
        "refinement_steps",
    ):
        overrides[name] = getattr(args, name, None)

    rates = getattr(args, "rates", None)
    epochs = getattr(args, "epochs", None)
    if rates is not None and epochs is not None:
        overrides["schedule"] = [{"rate": rate, "epochs": epochs} for rate in rates]
    config = experiment_service.resolve_config(file_values, **overrides)
    if (rates is None) != (epochs is None) and config.schedule:
        base = config.schedule
        if rates is not None:
            schedule = [LearningRateStage(rate=r, epochs=base[0].epochs) for r in rates]
        else:
            schedule = [LearningRateStage(rate=s.rate, epochs=epochs) for s in base]
        config = config.model_copy(update={"schedule": schedule})
    return config


def print_catalogue(stream: Optional[TextIO] = None) -> None:
    stream = stream or sys.stdout
    for name in problem_service.names:
        summary = problem_service.describe(name)
        defaults = problem_service.get(name).defaults
        bounds = " x ".join(f"[{lo:g}, {hi:g}]" for lo, hi in summary.bounds)
        print(
            f"{name:8s} {bounds:22s} n={summary.n_trial:<3d} m={summary.n_test:<3d} "
            f"n_a={summary.n_patches:<3d} {summary.inner_product.value:8s} "
            f"adaptive={defaults['adaptive']} {summary.description}",
            file=stream,
        )


def run(args: argparse.Namespace) -> None:
    if args.command == "problems":
        print_catalogue()
        return

    config = resolve_run_config(args)
    if args.command == "train":
        artifacts = experiment_service.run_train(config)
        print(artifacts["checkpoint"])
    elif args.command == "eval":
        summary = experiment_service.run_eval(config, args.checkpoint)
        print(summary["errors"])
        print(
            f"max rel. error weighted {summary['max_rel_err_weighted_pct']:.4g} %, "
            f"unweighted {summary['max_rel_err_unweighted_pct']:.4g} %"
        )
    elif args.command == "compare-refinement":
        print(experiment_service.run_compare_refinement(config))
    elif args.command == "dump-system":
        paths = experiment_service.dump_system(
            config, args.parameter, weights=args.weights, checkpoint_path=args.checkpoint
        )
        print(paths[0].parent)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    settings = get_settings()
    updates = {}
    if args.log_level:
        updates["log_level"] = args.log_level.upper()
    if args.log_format:
        updates["log_format"] = args.log_format
    configure_logging(settings.model_copy(update=updates) if updates else settings)

    try:
        run(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        if "Unknown problem" in str(e):
            print("available problems:", file=sys.stderr)
            for name in problem_service.names:
                print(f"  {name}: {problem_service.get(name).description}", file=sys.stderr)
        return e.exit_code
    except MinResError as e:
        logger.error("Run failed", error=str(e), error_type=type(e).__name__)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
