"""Command line entry point: ``simt train|eval|landscape|validate-config``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .adapt import AdaptationError
from .engine import NumericError
from .tasks import FlatDatasetError
from .harness import checkpoint as ck
from .harness.config import ConfigError, config_to_json, load_config
from .harness.landscape import landscape_scan, training_loss_fn, write_grid
from .harness.runner import rng_streams, build_fewshot, evaluate, load_networks, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="run an experiment config")
    t.add_argument("config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--output-dir", help="override output_dir from the config")

    e = sub.add_parser("eval", help="evaluate a checkpoint on fresh test tasks")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--network", choices=("theta", "momentum"), default="theta")
    e.add_argument("--tasks", type=int)
    e.add_argument("--seed", type=int)

    s = sub.add_parser("landscape", help="loss surface along two random directions")
    s.add_argument("checkpoint")
    s.add_argument("config")
    s.add_argument("--half-width", type=float, default=1.0)
    s.add_argument("--res", type=int, default=21)
    s.add_argument("--network", choices=("theta", "momentum"), default="theta")
    s.add_argument("--tasks", type=int, default=100)
    s.add_argument("--seed", type=int, help="direction seed (default: derived from config)")
    s.add_argument("--out", default="landscape.csv")

    v = sub.add_parser("validate-config", help="check a config and print it with defaults filled")
    v.add_argument("config")
    return p


def _landscape(args, cfg) -> None:
    if cfg.mode != "few-shot":
        raise ConfigError(["landscape scans support few-shot configs only"])
    if args.res < 1 or args.res % 2 == 0:
        raise ConfigError([f"--res must be odd, got {args.res}"])
    nets = load_networks(args.checkpoint, cfg)
    if args.network not in nets:
        raise ck.CheckpointError(f"checkpoint has no {args.network!r} network")
    params, alpha = nets[args.network]
    setup = build_fewshot(cfg)
    ss = rng_streams(cfg.seed)["directions"] if args.seed is None else np.random.SeedSequence(args.seed)
    rng = np.random.default_rng(ss)
    batch = setup.batch(setup.train, args.tasks, rng)
    grid, _, _ = landscape_scan(params, training_loss_fn(batch, setup.model, alpha), rng,
                                args.half_width, args.res)
    write_grid(args.out, grid)
    c = (args.res - 1) // 2
    print(json.dumps({"out": args.out, "center_loss": float(grid[c, c])}))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.cmd == "validate-config":
            print(config_to_json(cfg))
        elif args.cmd == "train":
            if args.output_dir:
                cfg = cfg.model_copy(update={"output_dir": args.output_dir})
            print(json.dumps(run(cfg, resume=args.resume), indent=2, sort_keys=True))
        elif args.cmd == "eval":
            out = evaluate(args.checkpoint, cfg, args.network, args.tasks, args.seed)
            print(json.dumps(out, indent=2, sort_keys=True))
        elif args.cmd == "landscape":
            _landscape(args, cfg)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, AdaptationError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FlatDatasetError) as e:
        # includes checkpoint version/corruption errors
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
