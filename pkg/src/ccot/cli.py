"""Command-line entry point: ``ccot <subcommand> [--config cfg.json] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import bench

log = logging.getLogger("ccot")

SUBCOMMANDS = ("gen-data", "pretrain", "train-phi", "train-psi", "train-baseline", "eval", "ablate-l", "ablate-r",
               "expressivity", "run")


def _config(args) -> bench.ExperimentConfig:
    cfg = bench.ExperimentConfig.load(args.config) if args.config else bench.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccot", description="Compressed contemplation-token experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="override the config's seed list with one seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--format", default="table", help="comma-separated: csv, json, table")
        if name in ("train-phi", "train-psi", "eval"):
            sp.add_argument("--r", type=float, help="compression ratio (default: every configured ratio)")
            sp.add_argument("--l", type=int, help="autoregressive layer (default: configured layer)")
        if name in ("train-baseline", "eval"):
            sp.add_argument("--method", choices=bench.METHODS, help="method (default: all configured)")
    return p


def _formats(spec: str) -> list[str]:
    fmts = [f.strip() for f in spec.split(",") if f.strip()]
    bad = set(fmts) - {"csv", "json", "table"}
    if bad:
        raise ValueError(f"unknown formats {sorted(bad)}")
    return fmts


def _emit(report: bench.RunReport, cfg: bench.ExperimentConfig, fmts, name: str) -> int:
    files = [f for f in fmts if f != "table"] or ["csv", "json"]
    bench.emit_report(report, cfg.out_dir, files, name=name)
    if "table" in fmts:
        print(bench.format_table(report))
    return 0 if report.ok else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(1)  # keeps runs bit-reproducible
    try:
        fmts = _formats(args.format)
        if args.command == "expressivity":
            text = bench.expressivity_report(args.out)
            if "table" in fmts or "csv" in fmts:
                print(text, end="")
            return 0
        cfg = _config(args)
        cfg.validate()
        cmd = args.command
        for seed in cfg.seeds:
            if cmd == "gen-data":
                bench.stage_data(cfg, seed)
            elif cmd == "pretrain":
                bench.stage_pretrain(cfg, seed)
            elif cmd in ("train-phi", "train-psi"):
                stage = bench.stage_phi if cmd == "train-phi" else bench.stage_psi
                ratios = [args.r] if args.r is not None else cfg.ratios
                for r in ratios:
                    stage(cfg, seed, r, args.l if args.l is not None else cfg.layer)
            elif cmd == "train-baseline":
                methods = [args.method] if args.method else [m for m in cfg.methods if m != "ccot"]
                for m in methods:
                    if m == "ccot":
                        raise ValueError("ccot is trained with train-phi and train-psi")
                    bench.stage_baseline(cfg, seed, m)
        if cmd in ("gen-data", "pretrain", "train-phi", "train-psi", "train-baseline"):
            print(json.dumps({"stage": cmd, "out": str(Path(cfg.out_dir).resolve()), "status": "ok"}))
            return 0
        if cmd == "eval":
            report = bench.RunReport()
            methods = [args.method] if args.method else list(cfg.methods)
            for seed in cfg.seeds:
                for m in methods:
                    if m == "ccot":
                        for r in ([args.r] if args.r is not None else cfg.ratios):
                            l = args.l if args.l is not None else cfg.layer
                            bench._guarded(report, m, r, l, seed,
                                           lambda r=r, l=l: bench.evaluate(cfg, seed, "ccot", r, l, train_missing=False))
                    else:
                        bench._guarded(report, m, None, None, seed,
                                       lambda m=m: bench.evaluate(cfg, seed, m, train_missing=False))
            return _emit(report, cfg, fmts, "report")
        if cmd == "ablate-l":
            return _emit(bench.run_ablation_l(cfg), cfg, fmts, "ablate-l")
        if cmd == "ablate-r":
            return _emit(bench.run_ablation_r(cfg), cfg, fmts, "ablate-r")
        if cmd == "run":
            return _emit(bench.run_experiment(cfg), cfg, fmts, "report")
    except (ValueError, OSError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
