"""Command-line entry point: one subcommand per pipeline stage, plus ``run`` and ``experiment``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .pipeline import PipelineConfig, run_experiment
from .stages import STAGES, MissingArtifactError, run_pipeline


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory for all artifacts")
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--fusion", choices=("nms", "sai"))
    common.add_argument("--confidence", choices=("scored", "unit"))
    common.add_argument("--candidates", choices=("template", "uniform"))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="semabs", description="Semantic box abstraction pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    run = sub.add_parser("run", parents=[common], help="run a range of stages")
    run.add_argument("--stage", default="all", help="'all', a stage name, or 'first:last'")
    sub.add_parser("experiment", parents=[common], help="ablations and the training-size sweep in one go")
    return p


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in ("seed", "fusion", "confidence", "candidates"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return cfg.with_strings(overrides) if overrides else cfg.validate()


def write_experiment(result, out: Path) -> str:
    out.mkdir(parents=True, exist_ok=True)
    lines = ["category,variant,mean_iou"]
    for (cat, variant), rep in sorted(result.iou.items()):
        lines.append(f"{cat},{variant},{rep.mean:.2f}")
    (out / "experiment.csv").write_text("\n".join(lines) + "\n")
    sweep = ["category,train_shapes,mean_iou"]
    for cat, points in sorted(result.sweep.items()):
        sweep += [f"{cat},{n},{v:.2f}" for n, v in points]
    (out / "sweep.csv").write_text("\n".join(sweep) + "\n")
    text = "\n".join(lines + [""] + sweep + ["", f"segmentation accuracy: {result.segmentation}",
                                            f"seconds: {result.seconds:.1f}"] + result.notes) + "\n"
    (out / "experiment.txt").write_text(text)
    return text


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "experiment":
            print(write_experiment(run_experiment(cfg), Path(args.out)), end="")
        else:
            run_pipeline(cfg, args.out, args.stage if args.command == "run" else args.command)
    except (MissingArtifactError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
