import argparse
import logging
import sys
from typing import List, Optional

from app.config import load_pipeline_config, settings
from app.utils import pipeline
from app.utils.errors import ConfigError, SynthError

logger = logging.getLogger("app.cli")

# which counts field --count overrides for each command
COUNT_FIELDS = {"sample-poses": "poses", "build-bodies": "bodies", "generate": "images"}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--seed", type=int, help="master seed (u64)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--jobs", type=int, help="worker threads")
    parser.add_argument("--count", type=int, help="number of items to produce")
    parser.add_argument("--progress", action="store_true", help="show progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posesynth", description="Synthetic 3D human pose data engine")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("fit-prior", "fit the pose prior on paths.poses"),
        ("sample-poses", "sample poses from paths.prior"),
        ("build-bodies", "build templates, body shapes and textured atlases"),
        ("generate", "render a dataset with annotations and manifest"),
        ("train-da", "domain-adaptation training with a no-adaptation baseline"),
    ):
        _common(sub.add_parser(name, help=help_text))

    ev = sub.add_parser("eval", help="detection-rate report for predictions against ground truth")
    _common(ev)
    ev.add_argument("--preds", help="predictions (pose file or annotation JSON lines)")
    ev.add_argument("--gts", help="ground truth (pose file or annotation JSON lines)")
    ev.add_argument("--name", default="run")
    ev.add_argument("--compare", nargs="+", metavar="REPORT", help="rank saved report JSON files instead")

    tr = sub.add_parser("trend", help="held-out error against training-set size and atlas count")
    _common(tr)
    tr.add_argument(
        "--experiment", choices=("size", "atlases", "both"), default="both", help="which trend to measure",
    )

    rc = sub.add_parser("reconstruct", help="overlay the reconstructed body on a photo")
    _common(rc)
    rc.add_argument("--image", required=True)
    rc.add_argument("--pose", required=True, help="camera-frame pose file or annotation JSON lines")
    rc.add_argument("--index", type=int, default=0, help="record to use from the pose file")
    rc.add_argument("--focal", type=float)
    rc.add_argument("--principal", type=float, nargs=2, metavar=("CX", "CY"))
    rc.add_argument("--alpha", type=float, default=0.5)

    sv = sub.add_parser("serve", help="run the HTTP API")
    sv.add_argument("--host", default="0.0.0.0")
    sv.add_argument("--port", type=int, default=8000)
    return parser


def run(args: argparse.Namespace) -> None:
    if args.command == "serve":
        import uvicorn

        uvicorn.run("app.main:app", host=args.host, port=args.port, reload=settings.debug)
        return

    overrides = {
        "seed": args.seed,
        "out": args.out,
        "jobs": args.jobs,
        "count": args.count,
        "count_field": COUNT_FIELDS.get(args.command, "images"),
    }
    config = load_pipeline_config(args.config, overrides)

    if args.command == "fit-prior":
        pipeline.cmd_fit_prior(config)
    elif args.command == "sample-poses":
        pipeline.cmd_sample_poses(config)
    elif args.command == "build-bodies":
        pipeline.cmd_build_bodies(config, progress=args.progress)
    elif args.command == "generate":
        pipeline.cmd_generate(config, progress=args.progress)
    elif args.command == "train-da":
        pipeline.cmd_train_da(config)
    elif args.command == "eval":
        if args.compare:
            ranking, _ = pipeline.cmd_compare(config, args.compare)
            for entry in ranking:
                print(f"{entry.rank}\t{entry.name}\t{entry.mean_fraction:.4f}\t{entry.mean_error:.4f}")
        elif args.preds and args.gts:
            report, _ = pipeline.cmd_eval(config, args.preds, args.gts, args.name)
            print(f"{report.name}: mean detection rate {report.mean_fraction:.4f}, mean error {report.mean_error:.4f}")
        else:
            raise ConfigError("eval needs --preds and --gts, or --compare")
    elif args.command == "trend":
        experiments = pipeline.TREND_EXPERIMENTS if args.experiment == "both" else (args.experiment,)
        paths = pipeline.cmd_trend(config, experiments, progress=args.progress)
        print(paths["summary"].read_text(encoding="utf-8"))
    elif args.command == "reconstruct":
        pipeline.cmd_reconstruct(
            config, args.image, args.pose, args.index, args.focal,
            tuple(args.principal) if args.principal else None, args.alpha,
        )


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO if not settings.debug else logging.DEBUG,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except SynthError as e:
        logger.error(f"{args.command} failed: {e.message}" + (f" {e.details}" if e.details else ""))
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
