"""Command-line entry point.

    makima edit --config <file> [--dump-attn] [--profile desk|paper]
                [--seed N] [--sigma logistic|identity]
                [--disable modulation|injection|propagation] ...

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric error.
MAKIMA_THREADS caps internal parallelism (outputs do not depend on it).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ArtifactIOError, ConfigError, NumericError
from .pipeline import PROFILES, emit_artifacts, load_config, run_edit
from .propagation import SIGMA_MODES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="makima",
        description="Multi-attribute video editing on a deterministic toy diffusion backbone",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    edit = sub.add_parser("edit", help="run one edit job end to end")
    edit.add_argument("--config", required=True, help="JSON edit configuration")
    edit.add_argument("--dump-attn", action="store_true", help="write per-step attention maps")
    edit.add_argument("--profile", choices=sorted(PROFILES), help="override working profile")
    edit.add_argument("--seed", type=int, help="override seed")
    edit.add_argument("--sigma", choices=SIGMA_MODES, help="override blend-weight squashing")
    edit.add_argument(
        "--disable",
        action="append",
        default=[],
        choices=("modulation", "injection", "propagation"),
        help="turn off one mechanism (repeatable)",
    )
    return parser


def _run_edit_command(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.profile is not None:
        config.profile = args.profile
    if args.seed is not None:
        config.seed = args.seed
    if args.sigma is not None:
        config.sigma_mode = args.sigma
    if args.dump_attn:
        config.dump_attention = True
    for name in args.disable:
        setattr(config, name, False)
    config.validate()
    edited, report, plan = run_edit(config)
    paths = emit_artifacts(edited, report, plan, config)
    print(f"edited latents: {paths['latents']}")
    print(f"report:         {paths['report']}")
    print(f"keyframe plan:  {paths['plan']}")
    print(
        f"clip_t_like={report.clip_t_like:.4f} clip_f_like={report.clip_f_like:.4f} "
        f"frame_acc_like={report.frame_acc_like:.4f} runtime={report.runtime_seconds:.2f}s"
    )
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "edit":
            return _run_edit_command(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactIOError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
