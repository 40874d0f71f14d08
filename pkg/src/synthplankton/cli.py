"""Command-line entry point: ``synthplankton <verb> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__


def _size(text: str) -> tuple[int, int]:
    from .dataset import parse_size

    try:
        return parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _extractor_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--extractor", choices=("random", "pretrained"), default="random")
    p.add_argument("--dim", type=int, default=64, help="feature dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default=None, help="TorchScript or .pt2 export file for --extractor pretrained")
    p.add_argument("--input-size", type=int, default=16, help="side length images are resized to before embedding")


def _extractor(args):
    from .features import FeatureExtractor

    return FeatureExtractor(
        kind=args.extractor, output_dim=args.dim, seed=args.seed, model_source=args.model, input_size=args.input_size
    )


def cmd_prepare_data(args) -> int:
    from .dataset import prepare_dataset, save_image_set

    if args.mode == "center" and args.count != 1:
        raise SystemExit("--count only applies to --mode random")
    images = prepare_dataset(args.input, args.mode, args.size, args.count, args.flip, args.seed, args.resize)
    save_image_set(images, args.output)
    print(f"wrote {len(images)} images at {images.resolution[0]}x{images.resolution[1]} to {args.output}")
    return 0


def cmd_make_toy_data(args) -> int:
    from .dataset import make_toy_images, save_image_set

    images = make_toy_images(args.n, args.resolution, args.seed)
    save_image_set(images, args.output)
    print(f"wrote {len(images)} synthetic images to {args.output}")
    return 0


def cmd_extract(args) -> int:
    from .dataset import load_prepared
    from .features import cache_features, extract_features

    feats = extract_features(load_prepared(args.images), _extractor(args))
    cache_features(feats, args.out)
    print(f"wrote {len(feats)}x{feats.dim} features ({feats.extractor_fingerprint}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .dataset import load_prepared
    from .harness import load_config, resolved_train_config
    from .trainer import GANTrainer, TrainingAborted, TrainingDiverged, latest_checkpoint

    config = load_config(args.config)
    trainer = GANTrainer(config.gen_spec, config.disc_spec, load_prepared(args.data), resolved_train_config(config), args.out)
    resume = args.resume
    if resume == "auto":
        resume = latest_checkpoint(args.out)
    if resume:
        trainer.load_checkpoint(resume)
        print(f"resumed from {resume} at iteration {trainer.state.iteration}")
    try:
        trainer.run()
    except (TrainingDiverged, TrainingAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rep = trainer.write_report({"name": config.name})
    trainer._samples(individual=True)
    print(json.dumps(rep, indent=2))
    return 0


def cmd_run(args) -> int:
    from .harness import ConfigError, load_config, run_experiment
    from .report import emit_table
    from .trainer import TrainingAborted, TrainingDiverged

    try:
        report = run_experiment(load_config(args.config), args.data, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, TrainingAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(emit_table([report], "markdown"))
    return 0


def cmd_evaluate(args) -> int:
    from .dataset import load_prepared
    from .features import load_features
    from .metrics import evaluate

    images = load_prepared(args.fake_images) if args.fake_images else None
    rep = evaluate(
        load_features(args.real),
        load_features(args.fake),
        images,
        args.kid_estimator,
        args.subset,
        args.subsets,
        args.seed,
    )
    text = json.dumps(rep.to_dict(), indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_audit(args) -> int:
    from .audit import audit_run
    from .dataset import load_prepared

    result = audit_run(
        load_prepared(args.generated),
        load_prepared(args.real),
        _extractor(args),
        args.k,
        args.tau_pix,
        args.tau_feat,
        args.out,
        seed=args.seed,
    )
    print(json.dumps(result.summary(), indent=2))
    return 0


def cmd_report(args) -> int:
    from .report import RunReport, emit_table

    reports = []
    for p in args.reports:
        path = Path(p)
        if path.is_dir():
            path = path / "report.json"
        reports.append(RunReport.from_dict(json.loads(path.read_text())))
    text = emit_table(reports, args.format)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_make_config(args) -> int:
    from .architectures import DiscriminatorSpec, GeneratorSpec
    from .harness import DataConfig, ExperimentConfig, save_config
    from .trainer import TrainConfig

    res = args.resolution
    config = ExperimentConfig(
        name=args.name or f"{args.generator}-{args.discriminator}-{res}",
        gen_spec=GeneratorSpec(variant=args.generator, output_resolution=res),
        disc_spec=DiscriminatorSpec(variant=args.discriminator),
        data=DataConfig(mode="none", size=(res, res)),
        train=TrainConfig(iterations=args.iterations, batch_size=args.batch_size),
    )
    save_config(config, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthplankton", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="crop / flip a directory of images into a prepared dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=("center", "random", "none"), default="center")
    p.add_argument("--size", type=_size, required=True, help="crop size HxW")
    p.add_argument("--count", type=int, default=1, help="random crops per image")
    p.add_argument("--flip", action="store_true", help="append a left-right mirror of every image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resize", type=_size, default=None, help="area-downscale crops to HxW")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("make-toy-data", help="write seeded synthetic blob/ring images")
    p.add_argument("--output", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("extract", help="embed images into a .featcache file")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    _extractor_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train one experiment on a prepared dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint file, or 'auto' for the latest in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="full prepare -> train -> evaluate -> audit pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="FID / KID between two feature caches")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--kid-estimator", choices=("biased", "unbiased"), default="unbiased")
    p.add_argument("--subset", type=int, default=100)
    p.add_argument("--subsets", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fake-images", default=None, help="generated image directory, for the diversity score")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("audit", help="nearest-neighbour memorisation audit")
    p.add_argument("--generated", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--tau-pix", type=float, default=0.02)
    p.add_argument("--tau-feat", type=float, default=None)
    p.add_argument("--out", required=True)
    _extractor_args(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="aggregate report.json files into a results table")
    p.add_argument("reports", nargs="+", help="report.json files or run directories")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-config", help="write a starter experiment.json")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default=None)
    p.add_argument("--generator", choices=("baseline", "fastgan", "stylegan2"), default="stylegan2")
    p.add_argument("--discriminator", choices=("baseline", "projected"), default="baseline")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_make_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
