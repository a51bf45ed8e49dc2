"""``blitzgp`` command-line tool.

Every command reads a JSON run config (``--config``) with flag overrides, and
writes its artifacts to the output directory. Failures print one JSON object
to stderr and exit nonzero: 2 for invalid configuration, 1 otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .data import load_features
from .errors import BlitzError, ConfigError
from .runs import (
    RunConfig,
    load_checkpoint,
    run_evaluate,
    run_frontier,
    run_predict,
    run_replicate_signal,
    run_replicate_toy,
    run_train,
)

COMMANDS = ("train", "predict", "evaluate", "frontier", "replicate-toy", "replicate-signal")


def _parse_grid(text: str) -> list[int]:
    try:
        sizes = [int(t) for t in text.lower().replace("x", ",").split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like '10' or '10x10', got {text!r}") from None
    if not sizes:
        raise argparse.ArgumentTypeError("empty grid")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blitzgp", description="Kronecker-structured variational GP regression.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--dataset", help="CSV file; switches the data source to csv")
        p.add_argument("--target", help="target column of --dataset")
        p.add_argument("--grid", type=_parse_grid, help="inducing points per dimension, e.g. 10x10 or 10")
        p.add_argument("--kernel", help="eq or sm:Q")
        p.add_argument("--batch", type=int)
        p.add_argument("--iters", type=int)
        p.add_argument("--model", choices=("blitz", "exact"))
        p.add_argument("--dense-guard-override", type=int, metavar="N", help="raise the dense-computation size caps to N")
        if name in ("predict", "evaluate"):
            p.add_argument("--checkpoint", help="defaults to <out>/checkpoint.json")
        if name == "predict":
            p.add_argument("--query", help="CSV of query inputs (feature columns of the training data)")
            p.add_argument("--query-grid", type=int, default=50, help="points per dimension of the default query grid")
        if name == "frontier":
            p.add_argument("--sizes", type=_parse_grid, help="grid sizes per dimension, e.g. 4,9,16")
    return parser


def _defaults_for(command: str) -> dict:
    if command == "replicate-signal":
        return {
            "data": {"source": "square_wave", "n": 2000, "test_fraction": 0.1, "normalize": True},
            "kernel": "sm:10",
            "grid": [20, 20],
            "train": {"iterations": 3000, "eval_every": 250},
        }
    if command == "replicate-toy":
        return {"data": {"source": "toy", "n": 600}, "grid": [10, 10], "train": {"iterations": 2000}}
    return {}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args) -> RunConfig:
    doc = _defaults_for(args.command)
    if args.config:
        try:
            with open(args.config) as fh:
                doc = _merge(doc, json.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out:
        over["out"] = args.out
    if args.dataset:
        over["data"] = {"source": "csv", "path": args.dataset}
    if args.target:
        over.setdefault("data", {})["target"] = args.target
    if args.grid:
        over["grid"] = args.grid
    if args.kernel:
        over["kernel"] = args.kernel
    if args.model:
        over["model"] = args.model
    if args.batch is not None:
        over.setdefault("train", {})["batch_size"] = args.batch
    if args.iters is not None:
        over.setdefault("train", {})["iterations"] = args.iters
    if args.dense_guard_override is not None:
        over["exact_max_n"] = args.dense_guard_override
        over["dense_cap"] = args.dense_guard_override
    if getattr(args, "sizes", None):
        over["frontier_sizes"] = args.sizes
    return RunConfig.from_dict(_merge(doc, over))


def _emit_error(exc: BaseException) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        doc["errors"] = exc.errors
    for attr in ("parameter", "iteration"):
        if getattr(exc, attr, None) is not None:
            doc[attr] = getattr(exc, attr)
    print(json.dumps(doc), file=sys.stderr)
    return 2 if isinstance(exc, ConfigError) else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            result = run_train(cfg)
            summary = result["report"].to_dict()
        elif args.command == "evaluate":
            summary = run_evaluate(cfg, args.checkpoint).to_dict()
        elif args.command == "predict":
            ckpt = args.checkpoint or cfg.out_dir / "checkpoint.json"
            query = None
            if args.query:
                _, _, doc = load_checkpoint(ckpt)
                query = load_features(args.query, doc["features"])
            path = run_predict(ckpt, cfg.out_dir, query, args.query_grid)
            summary = {"predictions": str(path)}
        elif args.command == "frontier":
            summary = {"frontier": run_frontier(cfg)}
        elif args.command == "replicate-toy":
            summary = run_replicate_toy(cfg)["report"]
        else:
            summary = run_replicate_signal(cfg)["report"]
    except (BlitzError, OSError, ValueError) as exc:
        return _emit_error(exc)
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
