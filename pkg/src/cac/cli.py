"""Command-line entry point: ``cac <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .core import ConfigError, NumericError, load_model, save_model
from .data import generate_two_domain_blobs, read_dataset_csv, write_dataset_csv
from .harness import (
    TrainConfig,
    adapt_target,
    dump_embeddings,
    evaluate,
    metrics_document,
    pretrain_source,
    run_ablation,
    sweep_param,
)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _read_data(path, config: TrainConfig | None = None, domain="target"):
    c = config.num_classes if config else None
    return read_dataset_csv(path, num_classes=c, domain=domain)


def cmd_gen_data(args):
    cfg = TrainConfig.load(args.config)
    source, target = generate_two_domain_blobs(cfg.shift)
    write_dataset_csv(source, args.out_source)
    write_dataset_csv(target, args.out_target)


def cmd_pretrain(args):
    cfg = TrainConfig.load(args.config)
    if args.data:
        source = _read_data(args.data, cfg, "source")
    else:
        source, _ = generate_two_domain_blobs(cfg.shift)
    save_model(pretrain_source(cfg, source), args.out)


def cmd_adapt(args):
    cfg = TrainConfig.load(args.config)
    model = load_model(args.model)
    if args.data:
        target = _read_data(args.data, cfg)
    else:
        _, target = generate_two_domain_blobs(cfg.shift)
    t0 = time.perf_counter()
    result = adapt_target(model, target, cfg)
    save_model(result.model, args.out)
    doc = metrics_document(cfg, result, time.perf_counter() - t0)
    Path(args.metrics).write_text(json.dumps(doc, indent=1))
    print(f"final avg accuracy {result.report.avg:.2f}")


def cmd_eval(args):
    model = load_model(args.model)
    dataset = read_dataset_csv(args.data, num_classes=model.num_classes)
    print(json.dumps(evaluate(model, dataset).to_dict(), indent=1))


def cmd_dump(args):
    model = load_model(args.model)
    dump_embeddings(model, read_dataset_csv(args.data, num_classes=model.num_classes), args.out)


def _write_rows(path, rows, fields):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def cmd_ablate(args):
    cfg = TrainConfig.load(args.config)
    rows = run_ablation(cfg)
    _write_rows(args.out, rows, ["variant", "mean", "std"])
    for row in rows:
        print(f"{row['variant']:>14}  {row['mean']:6.2f} +- {row['std']:.2f}")


def cmd_sweep(args):
    cfg = TrainConfig.load(args.config)
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {args.grid!r}") from None
    rows = sweep_param(cfg, args.param, grid)
    for row in rows:
        row["curve"] = ";".join(f"{v:.4f}" for v in row["curve"])
    _write_rows(args.out, rows, ["param", "value", "mean", "std", "curve"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write source and target CSVs for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-source", required=True)
    p.add_argument("--out-target", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the source model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="source CSV (default: generate from the config)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a source model to the target domain")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--data", help="target CSV (default: generate from the config)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="per-class and average accuracy")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss-component ablation table")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep K or beta")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=["K", "beta"])
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump", help="write extractor features with labels and predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
