"""Command-line entry point: ``shapereg {generate-data,train,evaluate,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DatasetError, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .experiment import (
    ExperimentConfig,
    TrainingError,
    ablate,
    evaluate,
    load_run,
    median_curves,
    save_run,
    train,
    write_ablation,
)
from .serialize import WeightFormatError

log = logging.getLogger("shapereg")


def _read_json(path: str | None) -> dict:
    return {} if path is None else json.loads(Path(path).read_text())


def cmd_generate(args) -> int:
    cfg = SyntheticConfig.from_dict(_read_json(args.config))
    ds = generate_synthetic(cfg, seed=args.seed)
    save_dataset(ds, args.out)
    log.info("wrote %d samples to %s", len(ds), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    data = args.data or cfg.dataset
    out = args.out or cfg.output
    if data is None or out is None:
        raise SystemExit("train needs --data and --out (or dataset/output in the config)")
    cfg.dataset, cfg.output = str(data), str(out)
    model, report = train(cfg, load_dataset(data), progress=True)
    save_run(out, cfg, model, report)
    avg = report.average
    log.info("%s: DSC %.2f±%.2f  ASD %.3f±%.3f mm", report.model, avg["dsc_mean"], avg["dsc_sd"], avg["asd_mean"], avg["asd_sd"])
    return 0


def cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    cfg, model = load_run(args.weights, dataset)
    report = evaluate(model, dataset, cfg.n_initial_shapes, seed=cfg.seed)
    report.write(args.out)
    log.info("%s: DSC %.2f  ASD %.3f mm", report.model, report.average["dsc_mean"], report.average["asd_mean"])
    return 0


def cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    models, cfgs = {}, []
    for run in args.runs.split(","):
        cfg, model = load_run(Path(run) / "weights.bin", dataset)
        if cfg.label in models:
            raise SystemExit(f"two runs share the label {cfg.label!r}")
        models[cfg.label] = model
        cfgs.append(cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfgs[0].corruption_seeds
    fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else None
    rows = ablate(models, dataset, fractions, seeds, cfgs[0].n_initial_shapes, cfgs[0].seed)
    write_ablation(rows, args.out)
    for name, curve in median_curves(rows).items():
        log.info("%s: %s", name, " ".join(f"{f:.1f}:{v:.3f}" for f, v in curve.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shapereg", description=__doc__)
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset directory")
    g.add_argument("--config", help="JSON with SyntheticConfig fields (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write weights.bin, report.json, history.csv")
    t.add_argument("--config", required=True)
    t.add_argument("--data")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a trained run on the test split")
    e.add_argument("--weights", required=True, help="run/weights.bin (config.json must sit beside it)")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="occlusion sweep over trained runs")
    a.add_argument("--runs", required=True, help="comma-separated run directories")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", help="comma-separated corruption seeds (default: first run's config)")
    a.add_argument("--fractions", help="comma-separated fractions (default: 0, 0.1, ..., 1)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (DatasetError, WeightFormatError, TrainingError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"shapereg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
