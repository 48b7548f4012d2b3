"""Command-line entry points.

    costfuse run-all --config FILE [--out DIR] [--threads N]
    costfuse <stage> --config FILE [--out DIR] [--threads N]
    costfuse gen --subtype color --per-class 1000 --size 250 --seed 7 --out DIR
    costfuse preset --name desk [--out FILE]

Exit codes: 0 success, 1 config validation error, 2 missing dependency,
3 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from importlib import resources
from pathlib import Path

from . import pipeline, synthgen

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DEPENDENCY = 2
EXIT_RUNTIME = 3


def _add_config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="TOML run configuration")
    sub.add_argument("--out", default=None, help="override the config's output directory")
    sub.add_argument("--threads", type=int, default=None,
                     help="cap numeric thread count (recorded in the run manifest)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="costfuse",
                                     description="dictionary-feature fusion pipeline")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="generate a dataset (config or direct flags)")
    gen.add_argument("--config", default=None)
    gen.add_argument("--out", default=None)
    gen.add_argument("--threads", type=int, default=None)
    gen.add_argument("--subtype", choices=["color", "shape"], default=None)
    gen.add_argument("--per-class", type=int, default=None)
    gen.add_argument("--size", type=int, default=250)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--paper-red", action="store_true",
                     help="use the literal red rule with unconstrained G and B")

    for stage in pipeline.STAGE_ORDER[1:]:
        _add_config_args(subs.add_parser(stage, help=f"run the {stage} stage"))
    _add_config_args(subs.add_parser("run-all", help="run every enabled stage"))

    preset = subs.add_parser("preset", help="write a bundled preset config")
    preset.add_argument("--name", choices=["desk", "paper"], required=True)
    preset.add_argument("--out", default=None, help="target file (default: stdout)")
    return parser


@contextlib.contextmanager
def _thread_cap(threads):
    if threads is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        print(f"warning: threadpoolctl unavailable; --threads {threads} recorded only",
              file=sys.stderr)
        yield
        return
    with threadpool_limits(limits=threads):
        yield


def _cmd_gen(args) -> int:
    if args.config is not None:
        cfg = pipeline.parse_config(args.config)
        with _thread_cap(args.threads):
            entry = pipeline.run_stage(cfg, "gen", out_dir=args.out, threads=args.threads)
        print(json.dumps(entry["notes"]))
        return EXIT_OK
    if args.subtype is None or args.per_class is None or args.out is None:
        raise pipeline.ConfigError(
            "gen needs either --config or all of --subtype, --per-class, --out")
    manifest = synthgen.gen_dataset(args.subtype, args.per_class, args.seed, args.size,
                                    args.out, paper_red=args.paper_red)
    print(f"wrote {len(manifest.entries)} images under {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "preset":
            text = resources.files("costfuse.presets").joinpath(
                f"{args.name}.toml").read_text(encoding="utf-8")
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
                print(f"wrote {args.out}")
            else:
                print(text, end="")
            return EXIT_OK
        if args.command == "gen":
            return _cmd_gen(args)
        cfg = pipeline.parse_config(args.config)
        with _thread_cap(args.threads):
            if args.command == "run-all":
                manifest = pipeline.run_all(cfg, out_dir=args.out, threads=args.threads)
                print(f"completed {len(manifest['stages'])} stages")
            else:
                entry = pipeline.run_stage(cfg, args.command, out_dir=args.out,
                                           threads=args.threads)
                print(f"stage {args.command} done in {entry['seconds']}s "
                      f"({len(entry['artifacts'])} artifacts)")
        return EXIT_OK
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as exc:  # numeric/runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
