"""``fusvdd synth|pretrain|finetune|score|eval --config <path> [--out <dir>] [--seed <n>]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .data import DataError
from .metrics import ScoreFileError
from .pipeline import run_eval, run_finetune, run_pretrain, run_score, run_synth
from .tensor import NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("fusvdd")


def _synth(cfg) -> None:
    train, test = run_synth(cfg)
    print(train)
    print(test)


def _pretrain(cfg) -> None:
    path, history = run_pretrain(cfg)
    print(f"{path}  loss {history[0]:.6g} -> {history[-1]:.6g} over {len(history)} epochs")


def _finetune(cfg) -> None:
    path, history = run_finetune(cfg)
    print(f"{path}  central term {history[0].central:.6g} -> {history[-1].central:.6g} over {len(history)} epochs")


def _score(cfg) -> None:
    print(run_score(cfg))


def _eval(cfg) -> None:
    report = run_eval(cfg)
    fmt = lambda v: "undefined" if v is None else f"{v:.4f}"
    print(f"pooled AUC {fmt(report.overall)}  video-averaged AUC {fmt(report.average)}")
    if report.undefined_videos:
        print(f"single-class videos excluded from the average: {', '.join(report.undefined_videos)}")


COMMANDS = {"synth": _synth, "pretrain": _pretrain, "finetune": _finetune, "score": _score, "eval": _eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusvdd", description="Multimodal one-class video anomaly detection.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="INI run configuration (defaults apply when omitted)")
    p.add_argument("--out", help="output directory, overrides [paths] output_dir")
    p.add_argument("--seed", type=int, help="run seed, overrides [training] seed")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.out, args.seed)
        COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ScoreFileError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
