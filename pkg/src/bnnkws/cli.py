"""Command-line entry point.

Verbs: index, split, pretrain-head, run, sweep, flops, report. Options can
come from a JSON config file (--config) with individual flags overriding
it. Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
failure (non-finite learning state).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .audio_frontend import FrontendConfig
from .bnn_engine import ModelFormatError
from .cl_algorithms import Algorithm, ClConfig, make_state, save_state
from .dataset_streams import (
    NUMERIC_WORDS,
    PRETRAIN_CLASSES,
    index_dataset,
    save_manifest,
    split_dataset,
)
from .errors import ConfigError, DataError, NumericError
from .flops_model import format_table_csv, format_table_text
from .harness import (
    RunConfig,
    SyntheticSpec,
    _build_source,
    emit_report,
    fit_head,
    load_report,
    run_continual,
    save_feature_cache,
    sensitivity_sweep,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); bad flags are config errors
        raise ConfigError(message)


def _dataclass_from_dict(cls, data: dict, context: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{context}: {e}") from None


def _config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    if "algorithms" in data:
        try:
            data["algorithms"] = tuple(
                Algorithm.from_tag(tag) for tag in data["algorithms"]
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None
    if "new_classes" in data and not isinstance(data["new_classes"], int):
        data["new_classes"] = tuple(data["new_classes"])
    if data.get("sample_budget") == "all":
        data["sample_budget"] = None
    if "seeds" in data:
        data["seeds"] = tuple(data["seeds"])
    for key, cls in (("cl", ClConfig), ("frontend", FrontendConfig),
                     ("synthetic", SyntheticSpec)):
        if key in data and isinstance(data[key], dict):
            data[key] = _dataclass_from_dict(cls, data[key], key)
    return _dataclass_from_dict(RunConfig, data, "config")


def _parse_new_classes(text: str):
    if text.isdigit():
        return int(text)
    classes = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = set(classes) - set(NUMERIC_WORDS)
    if bad:
        raise ConfigError(f"--new-classes: not numeric keywords: {sorted(bad)}")
    return classes


def _load_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON: {e}") from None
    if getattr(args, "feature_source", None):
        data["feature_source"] = args.feature_source
    if getattr(args, "dataset_root", None):
        data["dataset_root"] = args.dataset_root
    if getattr(args, "weights", None):
        data["weights_path"] = args.weights
    if getattr(args, "cache", None):
        data["cache_path"] = args.cache
    if getattr(args, "head", None):
        data["head_path"] = args.head
    if getattr(args, "seed", None) is not None:
        data["seeds"] = [args.seed]
    if getattr(args, "seeds", None):
        data["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "algorithms", None):
        data["algorithms"] = [s.strip() for s in args.algorithms.split(",")]
    if getattr(args, "new_classes", None):
        data["new_classes"] = _parse_new_classes(args.new_classes)
    if getattr(args, "budget", None):
        if args.budget == "all":
            data["sample_budget"] = None
        else:
            try:
                data["sample_budget"] = int(args.budget)
            except ValueError:
                raise ConfigError(f"--budget must be an integer or 'all', "
                                  f"got {args.budget!r}") from None
    if getattr(args, "out", None):
        data["out_dir"] = args.out
    if getattr(args, "workers", None):
        data["workers"] = args.workers
    return _config_from_dict(data)


def _cmd_index(args) -> int:
    index = index_dataset(args.dataset_root, seed=args.seed)
    counts: dict[str, int] = {}
    for e in index.entries:
        counts[e.mapped_class] = counts.get(e.mapped_class, 0) + 1
    if args.out:
        lines = [
            "\t".join(
                [e.path, e.raw_keyword, e.mapped_class]
                + ([str(e.crop_offset)] if e.crop_offset is not None else [])
            )
            for e in index.entries
        ]
        Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"{len(index.entries)} samples in {len(counts)} classes")
    for cls in sorted(counts):
        print(f"  {cls}: {counts[cls]}")
    return 0


def _cmd_split(args) -> int:
    index = index_dataset(args.dataset_root, seed=args.seed)
    splits = split_dataset(
        index, seed=args.seed,
        pretrain_fraction=args.pretrain_fraction,
        test_fraction=args.test_fraction,
    )
    save_manifest(splits, args.out)
    print(
        f"test={len(splits.test)} pretrain={len(splits.pretrain)} "
        f"cl_pool={len(splits.cl_pool)} -> {args.out}"
    )
    return 0


def _cmd_pretrain_head(args) -> int:
    cfg = _load_config(args)
    source = _build_source(cfg)
    head = fit_head(
        source.pretrain_features,
        source.pretrain_labels,
        PRETRAIN_CLASSES,
        learning_rate=cfg.synthetic.pretrain_lr,
        iterations=cfg.synthetic.pretrain_iterations,
    )
    clcfg = ClConfig(initial_class_count=head.num_classes)
    save_state(make_state(Algorithm.TINYOL, head, clcfg), args.head_out)
    if args.cache_out:
        save_feature_cache(source, args.cache_out)
        print(f"features -> {args.cache_out}")
    print(f"pretrained head ({head.num_classes} classes) -> {args.head_out}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    report = run_continual(cfg)
    _emit(report, cfg, args)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    report = sensitivity_sweep(cfg)
    _emit(report, cfg, args, stem="sweep")
    return 0


def _emit(report, cfg: RunConfig, args, stem: str = "report") -> None:
    out_dir = cfg.out_dir or "."
    formats = ("csv", "json") if args.format == "both" else (args.format,)
    written = emit_report(report, out_dir, formats=formats, stem=stem)
    for kind, path in written.items():
        print(f"{kind} -> {path}")
    mean_rows = [r for r in report.rows if r.seed == "mean"]
    for row in mean_rows:
        print(
            f"{row.algorithm:18s} k={row.k_new} budget={row.budget or 'all'} "
            f"old={row.acc_old:.3f} new={row.acc_new:.3f} all={row.acc_all:.3f}"
        )


def _cmd_flops(args) -> int:
    text = format_table_text(args.m, args.batch_size)
    csv = format_table_csv(args.m, args.batch_size)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "flops.csv").write_text(csv)
        (out / "flops.txt").write_text(text)
        print(f"written to {out}/flops.csv and {out}/flops.txt")
    return 0


def _cmd_report(args) -> int:
    report = load_report(args.input)
    formats = ("csv", "json") if args.format == "both" else (args.format,)
    written = emit_report(report, args.out or ".", formats=formats)
    for kind, path in written.items():
        print(f"{kind} -> {path}")
    return 0


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="single run seed")
    p.add_argument("--seeds", help="comma-separated run seeds")
    p.add_argument("--algorithms", help="comma-separated algorithm tags")
    p.add_argument("--new-classes", dest="new_classes",
                   help="number of new classes (1-4) or a comma list like one,two")
    p.add_argument("--budget", help="stream sample budget, or 'all'")
    p.add_argument("--feature-source", dest="feature_source",
                   choices=["synthetic", "bnn", "cache"])
    p.add_argument("--dataset-root", dest="dataset_root")
    p.add_argument("--weights", help="BNNKWS01 weights file")
    p.add_argument("--cache", help="feature cache (.npz)")
    p.add_argument("--head", help="pretrained head checkpoint")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=["csv", "json", "both"], default="both")


def _parser() -> _Parser:
    parser = _Parser(prog="bnnkws", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("index", help="index a speech-commands directory")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the index as TSV")
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("split", help="build and save the three-way split")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.03)
    p.add_argument("--pretrain-fraction", type=float, default=0.40)
    p.add_argument("--out", required=True, help="manifest path")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("pretrain-head", help="fit the 12-class head on pretrain features")
    _add_run_flags(p)
    p.add_argument("--head-out", dest="head_out", required=True)
    p.add_argument("--cache-out", dest="cache_out", help="also save a feature cache")
    p.set_defaults(func=_cmd_pretrain_head)

    p = sub.add_parser("run", help="run continual learning and report accuracies")
    _add_run_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="data-volume sensitivity sweep (64..16384)")
    _add_run_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("flops", help="print the backprop FLOP table")
    p.add_argument("--m", type=int, default=12, help="pre-training class count")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--out", help="directory for flops.csv / flops.txt")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("report", help="re-emit a saved JSON report")
    p.add_argument("--input", required=True, help="report.json path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=["csv", "json", "both"], default="csv")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, ModelFormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
