"""Merge run directories into one CSV, a comparison JSON and PNG figures."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import FormatError
from .metrics import GAP_KEYS, MetricsRecord, read_metrics_csv, records_to_csv

MODE_ORDER = ("teacher", "baseline", "no_ta", "bridgeta", "eval")
COMPARED = ("baseline", "no_ta", "bridgeta")


def _sort_key(r: MetricsRecord):
    mode_rank = MODE_ORDER.index(r.mode) if r.mode in MODE_ORDER else len(MODE_ORDER)
    return (mode_rank, r.run_id, r.epoch, 0 if r.split == "train" else 1)


def load_runs(run_dirs) -> list[MetricsRecord]:
    """All records from ``<dir>/metrics.csv`` for each dir, in a stable order."""
    if not run_dirs:
        raise FormatError("report needs at least one run directory")
    records: list[MetricsRecord] = []
    seen: set[str] = set()
    nc = None
    for d in run_dirs:
        recs = read_metrics_csv(Path(d) / "metrics.csv")
        if not recs:
            raise FormatError(f"{d}: metrics file has no rows")
        for r in recs:
            if nc is None:
                nc = len(r.ious)
            elif len(r.ious) != nc:
                raise FormatError(f"{d}: {len(r.ious)} classes, other runs have {nc}")
        ids = {r.run_id for r in recs}
        dup = ids & seen
        if dup:
            raise FormatError(f"{d}: run id(s) {sorted(dup)} already loaded")
        seen |= ids
        records.extend(recs)
    return sorted(records, key=_sort_key)


def _final_val(records: list[MetricsRecord]) -> dict[str, MetricsRecord]:
    out: dict[str, MetricsRecord] = {}
    for r in records:
        if r.split != "val":
            continue
        cur = out.get(r.run_id)
        if cur is None or r.epoch > cur.epoch:
            out[r.run_id] = r
    return out


def _clean(v: float):
    return None if math.isnan(v) else float(v)


def comparison(records: list[MetricsRecord]) -> dict:
    """Per-mode final val metrics, medians across runs, gap curves and deltas."""
    records = sorted(records, key=_sort_key)
    finals = _final_val(records)
    by_mode: dict[str, list[MetricsRecord]] = defaultdict(list)
    for run_id in sorted(finals):
        by_mode[finals[run_id].mode].append(finals[run_id])
    curves: dict[str, dict[str, list]] = defaultdict(dict)
    for r in records:
        if r.split == "val":
            c = curves[r.run_id]
            c.setdefault("epoch", []).append(r.epoch)
            c.setdefault("miou", []).append(r.miou)
            for k in GAP_KEYS:
                c.setdefault(f"gap_{k}", []).append(_clean(r.gaps.get(k, math.nan)))
    modes = {}
    for mode in sorted(by_mode, key=lambda m: MODE_ORDER.index(m) if m in MODE_ORDER else 99):
        runs = by_mode[mode]
        ious = np.array([r.ious for r in runs])
        modes[mode] = {
            "runs": {r.run_id: {"epoch": r.epoch, "miou": r.miou, "ious": list(r.ious),
                                "gaps": {k: _clean(r.gaps.get(k, math.nan)) for k in GAP_KEYS}} for r in runs},
            "median_miou": float(np.median([r.miou for r in runs])),
            "median_ious": [float(x) for x in np.median(ious, axis=0)],
            "median_gap_feat": _clean(float(np.median([r.gaps.get("feat", math.nan) for r in runs]))),
        }
    out = {"modes": modes, "curves": {k: curves[k] for k in sorted(curves)}}
    if "bridgeta" in modes and "baseline" in modes:
        out["delta"] = modes["bridgeta"]["median_miou"] - modes["baseline"]["median_miou"]
    if "bridgeta" in modes and "no_ta" in modes:
        out["delta_vs_no_ta"] = modes["bridgeta"]["median_miou"] - modes["no_ta"]["median_miou"]
    return out


def _plot(records: list[MetricsRecord], out: Path) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    val = [r for r in records if r.split == "val"]
    runs = sorted({r.run_id for r in val}, key=lambda rid: _sort_key(next(r for r in val if r.run_id == rid)))
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for rid in runs:
        rs = [r for r in val if r.run_id == rid]
        ax.plot([r.epoch for r in rs], [r.miou for r in rs], label=rid)
    ax.set_xlabel("epoch")
    ax.set_ylabel("val mIoU")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "miou.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append("miou.png")

    distilled = [rid for rid in runs if any(not math.isnan(r.gaps.get("feat", math.nan)) for r in val if r.run_id == rid)]
    if distilled:
        fig, axes = plt.subplots(1, len(GAP_KEYS), figsize=(12, 3.6))
        for ax, k in zip(axes, GAP_KEYS):
            for rid in distilled:
                rs = [r for r in val if r.run_id == rid]
                ax.plot([r.epoch for r in rs], [r.gaps.get(k, math.nan) for r in rs], label=rid)
            ax.set_title(f"{k} gap")
            ax.set_xlabel("epoch")
            ax.set_yscale("log")
        axes[0].set_ylabel("mean squared distance per cell")
        axes[-1].legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "gaps.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append("gaps.png")
    return written


def write_report(run_dirs, out_dir, figures: bool = True) -> dict:
    """Write ``metrics.csv``, ``comparison.json`` and figures into ``out_dir``."""
    records = load_runs(run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(records_to_csv(records))
    summary = comparison(records)
    with open(out / "comparison.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if figures:
        summary["figures"] = _plot(records, out)
    return summary
