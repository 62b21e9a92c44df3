"""``svp`` command line interface.

    svp <subcommand> --config cfg.json [section.key=value ...]

Subcommands: make-corpus, train-style, train-diffusion, generate, evaluate,
export-figures. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure. ``SVP_OUT_ROOT`` overrides the configured output root.
"""

from __future__ import annotations

import argparse
import json
import sys

import torch

from . import commands
from .config import RunConfig, apply_overrides
from .errors import ConfigError, ContractError, DataError, NumericError


def load_config(args) -> RunConfig:
    if args.config:
        try:
            with open(args.config) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {args.config} is not valid JSON: {e}")
    else:
        data = RunConfig().to_dict()
    if args.override:
        apply_overrides(data, args.override)
    return RunConfig.from_dict(data)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run configuration (defaults apply if omitted)")
    p.add_argument("override", nargs="*", metavar="section.key=value",
                   help="config overrides, values parsed as JSON literals")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="svp",
                                 description="style-prior talking-head pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="render the synthetic clip corpus")
    _common(p)
    p.set_defaults(func=commands.cmd_make_corpus)

    p = sub.add_parser("train-style", help="contrastive style-encoder training")
    _common(p)
    p.set_defaults(func=commands.cmd_train_style)

    p = sub.add_parser("train-diffusion", help="one stage of generator training")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    _common(p)
    p.set_defaults(func=commands.cmd_train_diffusion)

    p = sub.add_parser("generate", help="sample a clip from trained checkpoints")
    p.add_argument("--reference", required=True,
                   help="corpus clip id or clip directory for the reference frame")
    p.add_argument("--driving", required=True,
                   help="clip supplying audio and keypoints")
    p.add_argument("--style-source", default=None,
                   help="clip whose style prior conditions the generator")
    p.add_argument("--style-mean", action="store_true",
                   help="condition on the prior mean instead of a sample")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--start", type=int, default=0,
                   help="first driving frame of the window")
    p.add_argument("--ref-frame", type=int, default=0)
    p.add_argument("--checkpoint", default=None,
                   help="explicit generator checkpoint (default: latest stage)")
    p.add_argument("--out-name", default=None)
    _common(p)
    p.set_defaults(func=commands.cmd_generate)

    p = sub.add_parser("evaluate", help="clustering, reconstruction and transfer metrics")
    p.add_argument("--recon-clips", type=int, default=8)
    p.add_argument("--transfer-clips", type=int, default=8)
    p.add_argument("--cross-clips", type=int, default=4)
    p.add_argument("--compact", action="store_true",
                   help="omit per-case rows from the report")
    _common(p)
    p.set_defaults(func=commands.cmd_evaluate)

    p = sub.add_parser("export-figures", help="projection, ablation and interpolation data")
    p.add_argument("--interp-steps", type=int, default=8)
    _common(p)
    p.set_defaults(func=commands.cmd_export_figures)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args)
        torch.set_num_threads(cfg.threads)
        args.func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, ContractError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
