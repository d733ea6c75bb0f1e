"""Command-line entry point: ``bridgeta <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .errors import BridgeTAError, FormatError
from .losses import LevelToggles, LossWeights
from .metrics import write_metrics_csv
from .scenegen import GenConfig, generate_dataset, load_dataset, load_gen_config
from .training import TrainConfig, evaluate, run_mode

SEED_ENV = "BRIDGETA_SEED"
LEVEL_NAMES = ("fld", "dld", "lld")


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise FormatError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def parse_levels(text: str) -> dict:
    """``"fld,lld"`` -> toggles with dld off; ``lld`` covers both logit terms."""
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in LEVEL_NAMES]
    if bad:
        raise FormatError(f"unknown level(s) {bad}; choose from {', '.join(LEVEL_NAMES)}")
    return {"fld": "fld" in names, "dld": "dld" in names,
            "lld_base": "lld" in names, "lld_aux": "lld" in names}


def build_train_config(args, mode: str) -> TrainConfig:
    """Config file, then CLI flags, then ``BRIDGETA_SEED`` (highest)."""
    d = _read_json(args.config) if getattr(args, "config", None) else {}
    d["mode"] = mode
    for key in ("epochs", "batch_size", "lr", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "record_time", False):
        d["record_time"] = True
    weights = dict(d.get("weights", {}))
    for i in (1, 2, 3):
        v = getattr(args, f"lambda{i}", None)
        if v is not None:
            weights[f"lambda{i}"] = v
    d["weights"] = weights
    levels = dict(d.get("levels", {}))
    if getattr(args, "levels", None):
        levels.update(parse_levels(args.levels))
    if getattr(args, "no_aux", False):
        levels["lld_aux"] = False
    d["levels"] = levels
    env = _env_seed()
    if env is not None:
        d["seed"] = env
    d["data_dir"] = str(args.data)
    d["out_dir"] = str(args.out)
    return TrainConfig.from_dict(d)


def _print_final(result) -> None:
    f = result.final()
    print(f"run_id={f.run_id} epoch={f.epoch} val_miou={f.miou:.6f} "
          + " ".join(f"iou_{i}={v:.6f}" for i, v in enumerate(f.ious)))


def cmd_gen(args) -> int:
    cfg = load_gen_config(args.config) if args.config else GenConfig()
    env = _env_seed()
    if env is not None:
        cfg = dataclasses.replace(cfg, seed=env)
    manifest = generate_dataset(cfg, args.out)
    print(f"wrote {args.out} content_hash={manifest['content_hash']}")
    return 0


def _train(args, mode: str, teacher=None) -> int:
    cfg = build_train_config(args, mode)
    result = run_mode(cfg, load_dataset(args.data), args.out, teacher_ckpt=teacher)
    _print_final(result)
    return 0


def cmd_train_teacher(args) -> int:
    return _train(args, "teacher")


def cmd_train_baseline(args) -> int:
    return _train(args, "baseline")


def cmd_distill(args) -> int:
    return _train(args, "no_ta" if args.no_ta else "bridgeta", teacher=args.teacher)


def cmd_eval(args) -> int:
    rec = evaluate(args.ckpt, load_dataset(args.data), split=args.split,
                   run_id=Path(args.ckpt).stem)
    print(f"split={rec.split} miou={rec.miou:.6f} "
          + " ".join(f"iou_{i}={v:.6f}" for i, v in enumerate(rec.ious)))
    if args.out:
        write_metrics_csv(args.out, [rec])
    return 0


def cmd_report(args) -> int:
    from .report import write_report

    summary = write_report(args.runs, args.out, figures=not args.no_figures)
    for mode, info in summary["modes"].items():
        print(f"{mode}: median val mIoU {info['median_miou']:.6f} over {len(info['runs'])} run(s)")
    if "delta" in summary:
        print(f"delta (bridgeta - baseline): {summary['delta']:+.6f}")
    return 0


def cmd_bench(args) -> int:
    from .report import write_report
    from .training import MODES

    data = Path(args.data)
    if not (data / "manifest.json").exists():
        generate_dataset(GenConfig(), data)
    dataset = load_dataset(data)
    out = Path(args.out)
    seeds = [int(s) for s in args.seeds.split(",")]
    base = build_train_config(argparse.Namespace(**{**vars(args), "data": data, "out": out}), "teacher")
    dirs = []
    for seed in seeds:
        for mode in MODES:
            cfg = dataclasses.replace(base, mode=mode, seed=seed)
            run_dir = out / cfg.run_id
            result = run_mode(cfg, dataset, run_dir,
                              teacher_ckpt=out / f"teacher-seed{seed}" / "teacher.ckpt")
            _print_final(result)
            dirs.append(run_dir)
    write_report(dirs, out / "report")
    return 0


def _add_train_args(p, distill: bool = False) -> None:
    p.add_argument("--data", required=True, type=Path, help="dataset directory from `gen`")
    p.add_argument("--out", required=True, type=Path, help="run output directory")
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--record-time", action="store_true",
                   help="fill the seconds column (makes metrics.csv run-dependent)")
    if distill:
        p.add_argument("--teacher", required=True, type=Path, help="teacher.ckpt from train-teacher")
        p.add_argument("--no-ta", action="store_true", help="direct teacher-student ablation")
        p.add_argument("--levels", help="comma list from fld,dld,lld (default: all)")
        p.add_argument("--no-aux", action="store_true", help="drop the cross-head KL terms")
        for i in (1, 2, 3):
            p.add_argument(f"--lambda{i}", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bridgeta", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", type=Path, help="JSON file with GenConfig fields")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-teacher", help="train the lidar+camera teacher")
    _add_train_args(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-baseline", help="train the camera-only student alone")
    _add_train_args(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("distill", help="distil a student from a frozen teacher")
    _add_train_args(p, distill=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="IoU of a student checkpoint")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out", type=Path, help="optional metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge runs into CSV, JSON and figures")
    p.add_argument("--runs", required=True, nargs="+", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="all four modes over several seeds, then report")
    p.add_argument("--data", required=True, type=Path, help="dataset dir (generated if absent)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--config", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BridgeTAError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
