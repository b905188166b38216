"""Command-line entry point.

Every stage subcommand reads its inputs from, and writes its outputs to, the
run directory named by the configuration, so a pipeline can be driven one
stage at a time or end to end with ``pipeline``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import io
from .config import STAGES, load_config, parse_override, _merge
from .errors import ConfigError, CrystalConceptsError, StageFailed
from .pipeline import Pipeline
from .synthetic import SyntheticTemplateSpec, make_synthetic_dataset

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# subcommand -> pipeline stage
STAGE_COMMANDS = {
    "train-vqvae": "train_vqvae",
    "extract": "extract",
    "train-gen": "train_gen",
    "sample": "sample",
    "filter": "filter",
    "refine": "refine",
    "train-base": "train_base",
    "generate": "generate",
    "evaluate": "evaluate",
    "interpret": "interpret",
}


def _config_args(p):
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--preset", default="full", help="base defaults: 'full' (full scale) or 'desk'")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting, e.g. --set codebook.codebook_size=64 (repeatable)")
    p.add_argument("--output-dir", help="run directory (default from the config)")
    p.add_argument("--seed", type=int, help="run seed (default from the config)")


def build_parser():
    parser = argparse.ArgumentParser(prog="crystalconcepts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate crystal files into canonical JSON lines")
    p.add_argument("path", help="file or directory to read")
    p.add_argument("--format", choices=("jsonl", "cif-subset"), default="jsonl")
    p.add_argument("--out", required=True, help="output JSON-lines file")
    p.add_argument("--strict", action="store_true", help="stop at the first bad file or record")
    p.add_argument("--max-atoms", type=int, default=io.MAX_ATOMS)

    p = sub.add_parser("synth", help="write a synthetic template dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--templates", nargs="+", help="template names")
    p.add_argument("--jitter", type=float)
    p.add_argument("--holdout-fraction", type=float)

    p = sub.add_parser("data", help="run the data stage of the configured pipeline")
    _config_args(p)
    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the {STAGE_COMMANDS[name]} stage in the run directory")
        _config_args(p)

    p = sub.add_parser("pipeline", help="run every enabled stage, resuming where a previous run stopped")
    _config_args(p)
    p.add_argument("--stop-after", choices=STAGES)
    p.add_argument("--no-resume", action="store_true", help="ignore state.json and start over")
    return parser


def resolve_config(args):
    overrides = {}
    for text in args.overrides:
        overrides = _merge(overrides, parse_override(text))
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, args.preset, overrides)


def _cmd_ingest(args):
    result = io.ingest(args.path, args.format, strict=args.strict, max_atoms=args.max_atoms)
    io.write_jsonl(result.crystals, args.out)
    print(json.dumps({"crystals": len(result.crystals), "errors": result.errors}, indent=2))


def _cmd_synth(args):
    fields = {"count": args.count}
    if args.templates:
        fields["templates"] = tuple(args.templates)
    if args.jitter is not None:
        fields["jitter"] = args.jitter
    if args.holdout_fraction is not None:
        fields["holdout_fraction"] = args.holdout_fraction
    try:
        spec = SyntheticTemplateSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    crystals = make_synthetic_dataset(spec, args.seed)
    io.write_jsonl(crystals, args.out)
    print(f"wrote {len(crystals)} crystals to {args.out}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ingest":
            _cmd_ingest(args)
        elif args.command == "synth":
            _cmd_synth(args)
        else:
            pipe = Pipeline(resolve_config(args))
            if args.command == "pipeline":
                report = pipe.run(stop_after=args.stop_after, resume=not args.no_resume)
            else:
                stage = STAGE_COMMANDS.get(args.command, args.command)
                report = {stage: pipe.run_stage(stage)[stage]}
            print(json.dumps(report, indent=2, default=str))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (CrystalConceptsError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
