"""``instyle`` command line: data generation through evaluation.

Every command accepts ``--config FILE`` (plain ``key = value``) and
``--seed``; ``MC_SEED`` is the seed fallback. Failures print one line to
stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, pipeline
from .config import ConfigError, resolve
from .training import VARIANTS

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: usage error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="plain key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config file and MC_SEED")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="instyle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"instyle {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and manifest")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--corruption-rate", type=float)
    p.add_argument("--prefix")

    p = sub.add_parser("calibrate", help="fit filter thresholds on a labeled manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--rejection-cap", type=float, required=True)
    p.add_argument("--out", type=Path, required=True, help="thresholds JSON file")

    p = sub.add_parser("filter", help="split a manifest into accepted and rejected")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--thresholds", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train one stage")
    _common(p)
    p.add_argument("--stage", type=int, choices=(0, 1, 2, 3), required=True)
    p.add_argument("--data", type=Path, required=True, help="training manifest")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--base", type=Path, help="stage-0 checkpoint (stages 1 and 2)")
    p.add_argument("--ref-ckpt", type=Path, help="stage-1 checkpoint (stage 3)")
    p.add_argument("--style-ckpt", type=Path, help="stage-2 checkpoint (stage 3)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mask-policy", choices=("none", "structural"))

    p = sub.add_parser("compose", help="insert a reference object into a scene")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--background", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True, help="binary placement mask PNG")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=20)

    p = sub.add_parser("evaluate", help="benchmark methods on a manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--method", action="append", required=True,
                   help="copy-paste, oracle, or NAME=CHECKPOINT; repeatable")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=("table", "jsonl"), default="table")

    p = sub.add_parser("ablate", help="train one protocol variant on a stage-0 base")
    _common(p)
    p.add_argument("--variant", choices=tuple(VARIANTS), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _overrides(args) -> dict:
    keys = ("seed", "n", "corruption_rate", "prefix", "rejection_cap", "mask_policy")
    out = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "command", None) == "train":
        stage = args.stage
        out[{0: "stage0_steps", 3: "stage3_steps"}.get(stage, "steps")] = args.steps
        out["stage0_lr" if stage == 0 else "lr"] = args.lr
    return out


def run(args) -> str:
    cfg = resolve(args.config, _overrides(args))
    cmd = args.command
    if cmd == "gen-data":
        return str(pipeline.gen_data(cfg, args.out))
    if cmd == "calibrate":
        t = pipeline.calibrate(cfg, args.manifest, args.out)
        return f"T_clip={t.T_clip:.6f} T_dino={t.T_dino:.6f} T_csd={t.T_csd:.6f}"
    if cmd == "filter":
        accepted, rejected = pipeline.filter_manifest(cfg, args.manifest, args.thresholds, args.out)
        return f"{accepted} {rejected}"
    if cmd == "train":
        if args.stage in (1, 2) and args.base is None:
            raise UsageError(f"train --stage {args.stage} requires --base")
        if args.stage == 3 and (args.ref_ckpt is None or args.style_ckpt is None):
            raise UsageError("train --stage 3 requires both --ref-ckpt and --style-ckpt")
        for label, path in (("base", args.base), ("ref-ckpt", args.ref_ckpt), ("style-ckpt", args.style_ckpt)):
            if path is not None and not path.is_file():
                raise FileNotFoundError(f"--{label} not found: {path}")
        return str(pipeline.train(cfg, args.stage, args.data, args.out, base=args.base,
                                  ref_ckpt=args.ref_ckpt, style_ckpt=args.style_ckpt))
    if cmd == "compose":
        return str(pipeline.compose_files(args.ckpt, args.reference, args.background, args.mask, args.out,
                                          steps=args.steps, seed=cfg.seed))
    if cmd == "evaluate":
        methods = pipeline.resolve_methods(args.method, cfg)
        report = pipeline.evaluate(cfg, args.manifest, methods, args.out, args.format)
        return report.table() if args.format == "table" else report.jsonl()
    if cmd == "ablate":
        if not args.base.is_file():
            raise FileNotFoundError(f"--base not found: {args.base}")
        return str(pipeline.run_variant(cfg, args.variant, args.data, args.out, args.base))
    raise UsageError(f"unknown command {cmd!r}")  # pragma: no cover - argparse rejects it first


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = run(args)
    except UsageError as exc:
        print(f"instyle {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError, FileNotFoundError, OSError, RuntimeError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"instyle {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_ERROR
    if result:
        print(result.rstrip("\n"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
