"""Command-line entry point: gen-data, train, eval, ablate, params.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import sys
from collections import defaultdict
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

from .config import ConfigError, TrainConfig, format_value, load_config
from .data import DataError, SyntheticConfig, generate_synthetic, load_corpus, save_corpus
from .layers import count_params
from .retrieval import DIRECTIONS, protocol_tag
from .trainer import (ABLATION_ROWS, LOSS_ROWS, Checkpoint, NumericError, ablation_matrix,
                      build_model, evaluate, train)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

REPORT_COLUMNS = ("label", "direction", "protocol", "subset_size", "seed", "metric", "subset", "value")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# report formatting


def report_rows(reports, label: str = ""):
    for rep in reports:
        for direction, protocol, metric, subset, value in rep.rows():
            yield (label, direction, protocol, rep.subset_size, rep.seed, metric, subset, value)


def _config_comment(cfg) -> str:
    return "".join(f"# {k} = {format_value(v)}\n" for k, v in asdict(cfg).items())


def write_report_csv(path, labelled_reports, cfg) -> None:
    """One row per (label, direction, protocol, metric, subset) plus mean rows.

    The effective config is echoed as leading ``#`` comment lines.
    """
    buf = io.StringIO()
    buf.write(_config_comment(cfg))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for label, reports in labelled_reports:
        for row in report_rows(reports, label):
            writer.writerow([*row[:-1], repr(float(row[-1]))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def format_table(labelled_reports) -> str:
    header = ("label", "direction", "protocol", "medR", "R@1", "R@5", "R@10")
    body = []
    for label, reports in labelled_reports:
        for rep in reports:
            m = rep.mean
            body.append((label or "-", rep.direction, rep.protocol, f"{m.medr:.2f}",
                         f"{m.r1:.4f}", f"{m.r5:.4f}", f"{m.r10:.4f}"))
    widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *body]]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument helpers


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file (desk preset by default)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    group = p.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None,
                           metavar=f.type.upper())


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig.desk()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for f in fields(TrainConfig):
        value = getattr(args, f"cfg_{f.name}")
        if value is not None:
            overrides[f.name] = value
    cfg = cfg.with_overrides(overrides)
    cfg.validate()
    return cfg


def _protocols(values: Sequence[str]) -> list[str]:
    out = []
    for v in values or ["car"]:
        try:
            tag = protocol_tag(v)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if tag not in out:
            out.append(tag)
    return out


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--protocol", action="append", metavar="car|car+|car++",
                   help="fusion protocol; repeatable (default car)")
    p.add_argument("--direction", action="append", choices=DIRECTIONS,
                   help="retrieval direction; repeatable (default both)")
    p.add_argument("--subset-size", type=int, default=0, help="0 uses the whole split")
    p.add_argument("--n-subsets", type=int, default=10)
    p.add_argument("--out", help="write the report as CSV")
    p.add_argument("--plot-dir", help="write figures into this directory")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    values = {f.name: getattr(args, f.name) for f in fields(SyntheticConfig)
              if getattr(args, f.name) is not None}
    cfg = SyntheticConfig(**values)
    corpus = generate_synthetic(cfg)
    save_corpus(corpus, args.out)
    counts = defaultdict(int)
    for r in corpus.records:
        counts[f"{r.split}{'' if r.paired else '-unpaired'}"] += 1
    print(f"wrote {len(corpus)} records to {args.out} "
          + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    corpus = load_corpus(args.corpus)
    log_path = Path(args.log or f"{args.checkpoint}.log.jsonl")
    result = train(cfg, corpus)
    log_path.write_text(result.log_text(), encoding="utf-8")
    result.best.save(args.checkpoint)
    print(_config_comment(result.best.config), end="")
    print(f"best epoch {result.best.epoch}: validation {cfg.select_direction} R@1 "
          f"{result.best.val_r1:.4f}; checkpoint {args.checkpoint}; log {log_path}")
    if args.plot_dir:
        from .plotting import plot_training_log
        print(f"figure {plot_training_log(result.log, Path(args.plot_dir) / 'training.png')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        ck = Checkpoint.load(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from None
    corpus = load_corpus(args.corpus)
    records = corpus.split(args.split)
    protocols = _protocols(args.protocol)
    directions = args.direction or list(DIRECTIONS)
    seed = ck.config.seed if args.seed is None else args.seed
    reports = evaluate(ck, records, protocols, directions, args.subset_size, args.n_subsets, seed)
    labelled = [("", reports)]
    print(_config_comment(ck.config), end="")
    print(format_table(labelled), end="")
    if args.out:
        write_report_csv(args.out, labelled, ck.config)
    if args.plot_dir:
        from .plotting import plot_recall
        print(f"figure {plot_recall(reports, Path(args.plot_dir) / 'recall.png')}")
    return EXIT_OK


def read_matrix(path) -> list[tuple[str, dict]]:
    """INI-style matrix: one ``[label]`` section per row of config overrides.

    A section may name ``preset = ablation:rowN`` or ``loss:circle`` to start
    from a built-in row before applying its own keys.
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(Path(path).read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    rows = []
    for label in parser.sections():
        values = dict(parser[label])
        preset = values.pop("preset", None)
        base = dict(_preset(preset)) if preset else {}
        base.update(values)
        rows.append((label, base))
    if not rows:
        raise ConfigError(f"{path}: no rows")
    return rows


def _preset(name: str) -> dict:
    table, _, row = name.partition(":")
    presets = {"ablation": ABLATION_ROWS, "loss": LOSS_ROWS}.get(table.strip())
    if presets is None or row.strip() not in presets:
        raise ConfigError(f"unknown preset {name!r}")
    return presets[row.strip()]


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    if args.matrix:
        rows = read_matrix(args.matrix)
    else:
        presets = {"ablation": ABLATION_ROWS, "loss": LOSS_ROWS}[args.preset]
        rows = [(label, dict(v)) for label, v in presets.items()]
    corpus = load_corpus(args.corpus)
    protocols = _protocols(args.protocol)
    table = ablation_matrix(cfg, rows, corpus, protocols, args.split, args.subset_size,
                            args.n_subsets)
    directions = args.direction or list(DIRECTIONS)
    labelled = [(row.label, [r for r in row.reports if r.direction in directions]) for row in table]
    print(_config_comment(cfg), end="")
    print(format_table(labelled), end="")
    if args.out:
        write_report_csv(args.out, labelled, cfg)
    if args.plot_dir:
        from .plotting import plot_ablation
        for d in directions:
            print(f"figure {plot_ablation(table, Path(args.plot_dir) / f'ablation_{d}.png', d)}")
    return EXIT_OK


def _group(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "adapters" else parts[0]


def cmd_params(args) -> int:
    cfg = _train_config(args)
    vocab = cfg.vocab_size or (load_corpus(args.corpus).config.vocab_size if args.corpus
                               else SyntheticConfig().vocab_size)
    model = build_model(cfg, vocab)
    trainable, frozen = count_params(model)
    groups = defaultdict(lambda: [0, 0])
    for name, p in model.named_parameters():
        groups[_group(name)][0 if p.trainable else 1] += p.size
    width = max(len(g) for g in groups)
    print(_config_comment(cfg), end="")
    print(f"{'group'.ljust(width)}  {'trainable':>10}  {'frozen':>10}")
    for g, (t, f) in groups.items():
        print(f"{g.ljust(width)}  {t:>10}  {f:>10}")
    total = trainable + frozen
    print(f"trainable {trainable}")
    print(f"frozen {frozen}")
    print(f"total {total}")
    print(f"ratio {trainable / total:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="car-retrieval", description="Cross-modal recipe retrieval toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    for f in fields(SyntheticConfig):
        kind = {"int": int, "float": float}[f.type]
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None,
                       help=f"default {f.default}")
    p.add_argument("--out", required=True, help="corpus JSONL path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and keep the best validation checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--log", help="JSON-lines log path (default <checkpoint>.log.jsonl)")
    p.add_argument("--plot-dir", help="write training curves into this directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, default=None, help="subset seed (default: config seed)")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a matrix of config overrides")
    p.add_argument("--corpus", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--matrix", help="INI file, one [label] section per row")
    src.add_argument("--preset", choices=("ablation", "loss"))
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    _add_eval_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="trainable/frozen parameter counts and ratio")
    p.add_argument("--corpus", help="take the vocabulary size from this corpus")
    _add_train_flags(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
