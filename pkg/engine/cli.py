import argparse
import logging
import os
import sys

from .core import (
    BASELINES,
    PLOT_FORMATS,
    PLOTS,
    ArtifactExistsError,
    ConfigError,
    PrerequisiteError,
    RunLockedError,
    analyze_gaps,
    evaluate_run,
    generate_data,
    load_config,
    make_plot,
    train_baseline,
    train_step,
    validate_config,
)
from .evaluation import MissingArtifactError
from .json_utils import safe_json_dumps
from .paths import build_run_paths, ensure_dir, resolve_config_path
from .runtime import get_runtime_info

EXIT_OK = 0
EXIT_PREREQUISITE = 1
EXIT_CONFIG = 2

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"


def _setup_logging(log_dir):
    ensure_dir(log_dir)
    root = logging.getLogger("")
    for handler in list(root.handlers):
        if getattr(handler, "_msn_handler", False):
            root.removeHandler(handler)
            handler.close()
    file_handler = logging.FileHandler(os.path.join(log_dir, "msn.log"))
    console = logging.StreamHandler()
    for handler in (file_handler, console):
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler.setLevel(logging.INFO)
        handler._msn_handler = True
        root.addHandler(handler)
    root.setLevel(logging.INFO)


def build_parser():
    parser = argparse.ArgumentParser(prog="msn", description="Multi-resolution meta segmentation experiments.")
    parser.add_argument("--version", action="store_true", help="Show version info and exit.")
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("gen-data", help="Generate virtual slides and the slide split.")
    gen.add_argument("--config", required=True, help="Config JSON (path or name under config/).")
    gen.add_argument("--out", required=True, help="Run directory to create.")
    gen.add_argument("--force", action="store_true", help="Overwrite existing slides.")

    gaps = sub.add_parser("analyze-gaps", help="Detect gap layers of the trained meta-branch.")
    gaps.add_argument("--run", required=True)
    gaps.add_argument("--force", action="store_true")

    train = sub.add_parser("train", help="Run one training step or train an ablation baseline.")
    train.add_argument("--run", required=True)
    target = train.add_mutually_exclusive_group(required=True)
    target.add_argument("--step", type=int, choices=(1, 2, 3))
    target.add_argument("--baseline", choices=BASELINES)
    train.add_argument(
        "--use-train-split",
        action="store_true",
        help="Train steps 2 and 3 on the training split instead of the sub-training split.",
    )
    train.add_argument("--force", action="store_true")

    evaluate = sub.add_parser("evaluate", help="Evaluate on the test split and write the report.")
    evaluate.add_argument("--run", required=True)
    evaluate.add_argument("--ablations", action="store_true", help="Include every ablation row.")
    evaluate.add_argument("--force", action="store_true")

    plot = sub.add_parser("plot", help="Write a figure from saved run artifacts.")
    plot.add_argument("--run", required=True)
    plot.add_argument("--what", required=True, choices=PLOTS)
    plot.add_argument("--format", dest="fmt", default="png", choices=PLOT_FORMATS)
    return parser


def _report_config_errors(errors):
    for error in errors:
        logging.error("Config error: %s", error)
        print(f"ERROR: {error}", file=sys.stderr)
    return EXIT_CONFIG


def _dispatch(args):
    if args.command == "gen-data":
        config_path = resolve_config_path(args.config)
        try:
            config = load_config(config_path)
        except (OSError, ValueError) as exc:
            return _report_config_errors([f"cannot read {config_path}: {exc}"])
        errors = validate_config(config)
        if errors:
            return _report_config_errors(errors)
        generate_data(config, args.out, force=args.force)
    elif args.command == "analyze-gaps":
        analyze_gaps(args.run, force=args.force)
    elif args.command == "train":
        if args.baseline:
            if args.use_train_split:
                logging.warning("--use-train-split is ignored for baselines")
            train_baseline(args.run, args.baseline, force=args.force)
        else:
            train_step(args.run, args.step, use_train_split=args.use_train_split, force=args.force)
    elif args.command == "evaluate":
        evaluate_run(args.run, ablations=args.ablations, force=args.force)
    elif args.command == "plot":
        path = make_plot(args.run, args.what, fmt=args.fmt)
        logging.info("Wrote %s", path)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.version:
        print(safe_json_dumps(get_runtime_info(), indent=2))
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    run_dir = args.out if args.command == "gen-data" else args.run
    _setup_logging(build_run_paths(run_dir, create=False).log_dir)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        return _report_config_errors(exc.errors)
    except (PrerequisiteError, MissingArtifactError, RunLockedError, ArtifactExistsError) as exc:
        logging.error("%s", exc)
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE


if __name__ == "__main__":
    sys.exit(main())
