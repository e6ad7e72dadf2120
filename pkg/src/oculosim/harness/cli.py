"""``oculosim`` command line: forge | train | eval | report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, RunConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=default, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=default, help="master seed (u64)")
    p.add_argument("--out", type=str, default=default, help="output directory")
    p.add_argument("--threads", type=int, default=default, help="worker threads; 1 = deterministic mode")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oculosim", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)

    sub.add_parser("forge", parents=[common], help="generate a phantom corpus and manifest")

    p = sub.add_parser("train", parents=[common], help="run the training curriculum")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--stop-at", type=int, help="stop after this global step (for interrupted runs)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--oracle", action="store_true", help="score ground-truth targets as predictions")
    p.add_argument("--counterfactual", action="store_true", help="add the stable-vs-progression locality check")
    p.add_argument("--split", choices=("train", "val", "test"))

    p = sub.add_parser("report", parents=[common], help="render tables and plots from eval bundles")
    p.add_argument("--bundle", action="append", default=[], metavar="NAME=DIR",
                   help="named bundle directory (repeatable); overrides config report.bundles")
    p.add_argument("--group-by", choices=("task", "modality"))
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override(seed=args.seed, out=args.out, threads=args.threads).validated()


def _set_threads(n: int) -> None:
    import torch
    torch.set_num_threads(n)
    if n == 1:
        torch.use_deterministic_algorithms(True)


def _require(path: Path | None, what: str) -> None:
    if path is not None and not Path(path).exists():
        raise ConfigError(f"{what} {path} does not exist")


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        if args.command in ("train", "eval"):
            _require(args.manifest, "manifest")
        if args.command == "train":
            _require(args.resume, "checkpoint")
            if args.stop_at is not None and args.stop_at < 0:
                raise ConfigError("--stop-at must be >= 0")
        if args.command == "eval":
            _require(args.checkpoint, "checkpoint")
            if args.checkpoint is None and not args.oracle:
                raise ConfigError("eval needs --checkpoint unless --oracle is given")
        bundles = {}
        if args.command == "report":
            for item in args.bundle:
                name, sep, path = item.partition("=")
                if not sep or not name or not path:
                    raise ConfigError(f"--bundle expects NAME=DIR, got {item!r}")
                bundles[name] = path
            bundles = bundles or dict(cfg.report.bundles)
            if not bundles:
                raise ConfigError("report needs at least one bundle")
            for path in bundles.values():
                _require(Path(path), "bundle")
    except ConfigError as exc:
        print(f"oculosim: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        _set_threads(cfg.threads)
        out = Path(cfg.out)
        if args.command == "forge":
            from .forge import cmd_forge
            path = cmd_forge(cfg.forge, cfg.seed, out, cfg.threads)
        elif args.command == "train":
            from ..worldsim import Corpus, run_curriculum
            path = run_curriculum(Corpus.open(args.manifest), cfg.train, cfg.seed, out, cfg.model,
                                  resume=args.resume, stop_at=args.stop_at)
        elif args.command == "eval":
            from dataclasses import replace

            from .evaluate import cmd_eval
            ecfg = replace(cfg.eval, oracle=cfg.eval.oracle or args.oracle,
                           counterfactual=cfg.eval.counterfactual or args.counterfactual,
                           split=args.split or cfg.eval.split)
            path = cmd_eval(ecfg, args.manifest, args.checkpoint, out, cfg.seed)
        else:
            from .report import cmd_report
            path = cmd_report(bundles, out, args.group_by or cfg.report.group_by)
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"oculosim: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
