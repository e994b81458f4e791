"""Command line entry point: ``looseqa {gen,train,grid,ablate-lag,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

from . import harness
from .autodiff import ConfigError
from .datagen import ParseError, serialize
from .harness import ExperimentConfig

log = logging.getLogger("looseqa")


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _single_config(args) -> ExperimentConfig:
    raw = _read_config(args.config)
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    return ExperimentConfig.from_dict(raw)


def _grid_configs(raw) -> list[ExperimentConfig]:
    """Accept a list of run configs or ``{"base": {...}, "runs": [{...}, ...]}``."""
    if isinstance(raw, list):
        base, runs = {}, raw
    else:
        base, runs = raw.get("base", {}), raw.get("runs", [])
    out = []
    for run in runs:
        merged = {**base, **run}
        for key in ("loss", "dataset"):
            if isinstance(base.get(key), dict) and isinstance(run.get(key), dict):
                merged[key] = {**base[key], **run[key]}
        out.append(ExperimentConfig.from_dict(merged))
    return out


def cmd_gen(args) -> int:
    cfg = _single_config(args)
    seed = cfg.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = harness.build_datasets(cfg, seed)
    splits = dict(data)
    if cfg.task == "span":
        splits = {"train_k": data["train_k"]}
        splits.update({f"dev_k{k}": d for k, d in data["dev_by_sentence"].items()})
    for name, ds in splits.items():
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for line in serialize(ds):
                fh.write(line + "\n")
        log.info("wrote %s (%d samples)", out / f"{name}.jsonl", len(ds))
    return 0


def cmd_train(args) -> int:
    cfg = _single_config(args)
    seed = cfg.seeds[0]
    rows, _ = harness.run_experiment(cfg, seed, args.out, args.format)
    for r in rows:
        print(f"{r.split:>10s} {r.metric:<20s} {r.value:.6f}")
    return 0


def cmd_grid(args) -> int:
    configs = _grid_configs(_read_config(args.config))
    if args.seed is not None:
        configs = [c.replace(seeds=(args.seed,)) for c in configs]
    _, failures = harness.grid_run(configs, args.out, args.format, workers=args.workers)
    for rid, err in failures:
        print(f"FAILED {rid}: {err}", file=sys.stderr)
    return 1 if failures else 0


def cmd_ablate(args) -> int:
    cfg = _single_config(args)
    lags = [int(x) for x in args.lags.split(",")]
    result = harness.ablate_lag(cfg, lags, args.out, args.format)
    out = Path(args.out)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lag", "seed", "batches", "clamp_count", "split", "metric", "value"])
        for n, runs in result.items():
            for seed, rows, trace in runs:
                clamps = harness.clamp_count(trace, cfg.loss.clamp)
                for r in rows:
                    w.writerow([n, seed, len(trace), clamps, r.split, r.metric, f"{r.value:.6f}"])
    for n, runs in result.items():
        counts = [harness.clamp_count(t, cfg.loss.clamp) for _, _, t in runs]
        print(f"lag={n:<3d} clamp-saturated batches: {counts}")
    return 0


def cmd_report(args) -> int:
    src = Path(args.input)
    files = sorted(src.glob("results_*.csv")) + sorted(src.glob("results_*.json"))
    rows = [r for f in files for r in harness.read_rows(f)]
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    agg = harness.aggregate(rows)
    harness.write_aggregate(agg, [], out / f"report.{args.format}", args.format)
    for a in agg:
        print(f"{a['method']:<28s} {a['loss']:<6s} {a['split']:<9s} {a['metric']:<20s} {a['mean']:.4f} ± {a['std']:.4f} (n={a['n']})")
    if args.plot_data:
        # mean loose factor per batch index across runs, per (method, loss)
        series: dict[tuple, dict[int, list[float]]] = {}
        for f in sorted(src.glob("trace_*.csv")):
            method, loss = f.stem[len("trace_") :].split("__")[:2]
            for t in harness.read_trace(f):
                series.setdefault((method, loss), {}).setdefault(t.batch_index, []).append(t.gamma)
        with open(out / "plot_gamma.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "loss", "batch_index", "mean_gamma"])
            for (method, loss), by_batch in sorted(series.items()):
                for b in sorted(by_batch):
                    w.writerow([method, loss, b, f"{statistics.fmean(by_batch[b]):.6f}"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="looseqa", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_out=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=need_out, help="output directory")
        sp.add_argument("--format", choices=["csv", "json"], default="csv")

    sp = sub.add_parser("gen", help="generate and write datasets")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train and evaluate a single run")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("grid", help="run every config x seed in a grid file")
    common(sp)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("ablate-lag", help="retrain with several loose-factor lags")
    common(sp)
    sp.add_argument("--lags", default="1,5,10,20")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="aggregate results files in a directory")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")
    sp.add_argument("--format", choices=["csv", "json"], default="csv")
    sp.add_argument("--plot-data", action="store_true", help="also write plot_gamma.csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError, OSError, json.JSONDecodeError) as exc:
        print(f"looseqa {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
