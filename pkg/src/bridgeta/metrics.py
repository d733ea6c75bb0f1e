"""IoU accumulation, per-epoch metric records, and the metrics CSV format."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError

LOSS_KEYS = ("seg", "fld", "dld", "lld_base", "lld_aux", "total")
GAP_KEYS = ("feat", "dec", "logit")


def csv_columns(num_classes: int) -> list[str]:
    return (["run_id", "mode", "epoch", "split"]
            + [f"iou_class_{c}" for c in range(num_classes)]
            + ["miou"] + [f"loss_{k}" for k in LOSS_KEYS]
            + [f"gap_{k}" for k in GAP_KEYS] + ["lr", "seconds"])


class IoUAccumulator:
    """Per-class TP/FP/FN counts over a whole split; prediction is logit > 0."""

    def __init__(self, num_classes: int):
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)

    def update_masks(self, pred: np.ndarray, labels: np.ndarray) -> None:
        """``pred`` and ``labels`` are boolean ``(N,) N_c x H x W`` masks."""
        pred = np.asarray(pred, dtype=bool)
        lab = np.asarray(labels) > 0.5
        if pred.ndim == 3:
            pred, lab = pred[None], lab[None]
        axes = (0, 2, 3)
        self.tp += np.sum(pred & lab, axis=axes)
        self.fp += np.sum(pred & ~lab, axis=axes)
        self.fn += np.sum(~pred & lab, axis=axes)

    def update(self, logits: np.ndarray, labels: np.ndarray) -> None:
        # sigmoid(x) > 0.5 exactly when x > 0
        self.update_masks(np.asarray(logits) > 0.0, labels)

    def ious(self) -> list[float]:
        out = []
        for tp, fp, fn in zip(self.tp, self.fp, self.fn):
            union = tp + fp + fn
            out.append(1.0 if union == 0 else float(tp) / float(union))
        return out


def iou_from_masks(pred: np.ndarray, labels: np.ndarray) -> list[float]:
    acc = IoUAccumulator(np.asarray(labels).shape[-3])
    acc.update_masks(pred, labels)
    return acc.ious()


@dataclass
class MetricsRecord:
    run_id: str
    mode: str
    epoch: int
    split: str
    ious: list[float]
    losses: dict[str, float] = field(default_factory=dict)
    gaps: dict[str, float] = field(default_factory=dict)
    lr: float = math.nan
    seconds: float = math.nan

    @property
    def miou(self) -> float:
        return float(sum(self.ious) / len(self.ious))

    def row(self) -> list[str]:
        vals = [self.run_id, self.mode, str(self.epoch), self.split]
        vals += [fmt(v) for v in self.ious]
        vals.append(fmt(self.miou))
        vals += [fmt(self.losses.get(k, math.nan)) for k in LOSS_KEYS]
        vals += [fmt(self.gaps.get(k, math.nan)) for k in GAP_KEYS]
        vals += [fmt(self.lr), fmt(self.seconds)]
        return vals


def fmt(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.10g}"


def records_to_csv(records: list[MetricsRecord]) -> str:
    if not records:
        raise FormatError("no metric records to write")
    nc = len(records[0].ious)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_columns(nc))
    for r in records:
        if len(r.ious) != nc:
            raise FormatError("records disagree on class count")
        writer.writerow(r.row())
    return buf.getvalue()


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    Path(path).write_text(records_to_csv(records))


def _num(s: str) -> float:
    return math.nan if s == "nan" else float(s)


def read_metrics_csv(path) -> list[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing metrics file {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty metrics file")
    header = rows[0]
    nc = sum(1 for h in header if h.startswith("iou_class_"))
    if header != csv_columns(nc):
        raise FormatError(f"{path}: unexpected columns {header}")
    out = []
    for row in rows[1:]:
        d = dict(zip(header, row))
        out.append(MetricsRecord(
            run_id=d["run_id"], mode=d["mode"], epoch=int(d["epoch"]), split=d["split"],
            ious=[_num(d[f"iou_class_{c}"]) for c in range(nc)],
            losses={k: _num(d[f"loss_{k}"]) for k in LOSS_KEYS},
            gaps={k: _num(d[f"gap_{k}"]) for k in GAP_KEYS},
            lr=_num(d["lr"]), seconds=_num(d["seconds"]),
        ))
    return out


class RunningMean:
    """Sample-weighted means of named scalars, summed in a fixed order."""

    def __init__(self):
        self.totals: dict[str, float] = {}
        self.count = 0

    def add(self, values: dict[str, float], n: int) -> None:
        for k, v in values.items():
            self.totals[k] = self.totals.get(k, 0.0) + float(v) * n
        self.count += n

    def means(self, keys: Optional[tuple] = None) -> dict[str, float]:
        keys = keys if keys is not None else tuple(self.totals)
        if self.count == 0:
            return {k: math.nan for k in keys}
        return {k: self.totals[k] / self.count if k in self.totals else math.nan for k in keys}
