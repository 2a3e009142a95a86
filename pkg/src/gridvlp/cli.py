"""Command-line entry point: ``gridvlp <mode> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from typing import Optional, Sequence

from .checkpoint import CheckpointError
from .config import MODES, ConfigError, RunConfig, load_config
from .data import DatasetError
from .tensor import NonFiniteError, ShapeError

log = logging.getLogger("gridvlp")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_NONFINITE = 5

LOG_ENV = "GRIDVLP_LOG"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridvlp", description="Grid-feature vision-language pre-training")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", help="key=value configuration file")
        for f in fields(RunConfig):
            if f.name == "mode":
                continue
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                           metavar=f.name.upper())
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("mode", "config") and v is not None}
    overrides["mode"] = args.mode
    return load_config(args.config, overrides)


def _write_metrics(config: RunConfig, mode: str, metrics: dict) -> None:
    path = config.path("metrics.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps({"mode": mode, **metrics}, sort_keys=True) + "\n")


def _summary(mode: str, metrics: dict) -> str:
    parts = []
    for k, v in metrics.items():
        if isinstance(v, float):
            parts.append(f"{k}={v:.4f}")
        elif isinstance(v, (int, str)) or v is None:
            parts.append(f"{k}={v}")
    return f"{mode}: " + " ".join(parts)


def run(config: RunConfig) -> dict:
    from . import train as tr

    mode = config.mode
    if mode == "gen-data":
        return {f"n_{k}": v for k, v in tr.gen_data(config).items()}
    if mode == "pretrain-cnn":
        return tr.run_pretrain_cnn(config)
    if mode == "pretrain":
        return tr.run_pretrain(config)
    if mode == "finetune":
        result = tr.run_finetune(config)
        return {k: v for k, v in result.items() if k != "curve"}
    if mode == "eval":
        return tr.run_eval(config)
    if mode == "bench":
        from .bench import run_bench

        report = run_bench(config.sizes(), config.depths(), config.bench_reps, config.bench_warmup,
                           config.bench_regions, config.channels(), config.fusion(),
                           full_depth=config.cnn_blocks, seed=config.seed,
                           progress=lambda r: log.info("%s %s depth %d: %.3f ms", r.path, r.size_str,
                                                       r.depth, r.total[0]))
        config.path("bench.md").parent.mkdir(parents=True, exist_ok=True)
        config.path("bench.md").write_text(report.markdown())
        config.path("bench.csv").write_text(report.csv())
        print(report.markdown())
        sizes = config.sizes()
        small = min(sizes, key=lambda s: s[0] * s[1])
        large = max(sizes, key=lambda s: s[0] * s[1])
        ratios = report.region_grid_ratios()
        return {"min_region_grid_ratio": min(ratios.values()),
                "full_speedup": report.speedup(small, large),
                "bench_markdown": str(config.path("bench.md"))}
    raise ConfigError(f"unknown mode {mode!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        metrics = run(config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, ShapeError) as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteError as e:
        print(f"non-finite value: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except Exception as e:  # noqa: BLE001 - last-resort categorisation
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_OTHER
    _write_metrics(config, config.mode, metrics)
    print(_summary(config.mode, metrics))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
