"""Training loops for the teacher, the camera-only baseline, and distillation.

Every run writes into its output directory:

* ``metrics.csv`` - one train and one val row per epoch
* ``run_manifest.json`` - config echo, dataset hash, checkpoint paths, final metrics
* checkpoints: ``teacher.ckpt``, ``student.ckpt`` and (with an assistant) ``ta.ckpt``
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import tensor as T
from .errors import PreconditionError, ShapeError
from .losses import LevelToggles, LossWeights, cell_mse, seg_loss, total_loss
from .metrics import GAP_KEYS, LOSS_KEYS, IoUAccumulator, MetricsRecord, RunningMean, write_metrics_csv
from .models import (ForwardBundle, ModelConfig, StudentModel, TAModule, TeacherModel,
                     forward_student, forward_teacher, full_distill_forward)
from .nn import AdamState, CosineSchedule, ParamRegistry, adam_step, load_checkpoint, lr_at, save_checkpoint
from .scenegen import Dataset, load_dataset

log = logging.getLogger(__name__)

MODES = ("teacher", "baseline", "bridgeta", "no_ta")


@dataclass
class TrainConfig:
    mode: str = "bridgeta"
    epochs: int = 20
    batch_size: int = 6
    lr: float = 1e-4
    min_lr: float = 0.0
    seed: int = 1
    channels: int = 16
    init: str = "he_uniform"
    weights: LossWeights = field(default_factory=LossWeights)
    levels: LevelToggles = field(default_factory=LevelToggles)
    ta_init_from_teacher: bool = True
    ta_seg_supervision: bool = False
    soft_dice: bool = False
    record_time: bool = False
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ShapeError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ShapeError("epochs and batch_size must be at least 1")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.levels, dict):
            self.levels = LevelToggles(**self.levels)

    @property
    def run_id(self) -> str:
        return f"{self.mode}-seed{self.seed}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ShapeError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunResult:
    config: TrainConfig
    records: list[MetricsRecord]
    checkpoints: dict[str, str]
    out_dir: Optional[Path]
    teacher: Optional[TeacherModel] = None
    student: Optional[StudentModel] = None
    ta: Optional[TAModule] = None

    def final(self, split: str = "val") -> MetricsRecord:
        return [r for r in self.records if r.split == split][-1]


def model_config_for(dataset: Dataset, channels: int, init: str = "he_uniform") -> ModelConfig:
    g = dataset.config
    return ModelConfig(channels=channels, num_classes=g.num_classes, height=g.height, width=g.width,
                       init=init)


def _steps(dataset: Dataset, cfg: TrainConfig) -> int:
    return math.ceil(len(dataset.scenes("train")) / cfg.batch_size)


def _nan_losses() -> dict[str, float]:
    return {k: math.nan for k in LOSS_KEYS}


def _gaps(bundle: ForwardBundle) -> dict[str, float]:
    """Per-cell mean squared teacher-student distance at each level."""
    pairs = {"feat": (bundle.F_cam_S, bundle.F_fus_T), "dec": (bundle.F_dec_S, bundle.F_dec_T),
             "logit": (bundle.L_SS, bundle.L_TT)}
    return {k: cell_mse(T.detach(s), T.detach(t)).item() for k, (s, t) in pairs.items()}


def track_gaps(bundles, epoch: int) -> dict[str, float]:
    """Sample-weighted mean gap triple over an iterable of bundles."""
    acc = RunningMean()
    for b in bundles:
        acc.add(_gaps(b), b.L_SS.shape[0] if len(b.L_SS.shape) == 4 else 1)
    out = acc.means(GAP_KEYS)
    log.debug("epoch %d gaps %s", epoch, out)
    return out


class _Run:
    """Shared epoch loop: optimiser, schedule, metric rows, timing."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, registry: ParamRegistry):
        self.cfg = cfg
        self.dataset = dataset
        self.registry = registry
        self.state = AdamState()
        self.schedule = CosineSchedule(cfg.lr, cfg.epochs, cfg.min_lr)
        self.records: list[MetricsRecord] = []
        self.nc = dataset.config.num_classes
        registry.zero_grad()

    def fit(self, train_step, evaluate_val) -> list[MetricsRecord]:
        cfg = self.cfg
        n_steps = _steps(self.dataset, cfg)
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr0 = lr_at(self.schedule, epoch)
            ious = IoUAccumulator(self.nc)
            losses = RunningMean()
            gaps = RunningMean()
            for i, batch in enumerate(self.dataset.batches("train", cfg.batch_size, cfg.seed, epoch)):
                lr = lr_at(self.schedule, epoch + i / n_steps)
                with T.Tape():
                    loss, logits, values, gap = train_step(batch)
                    T.backward(loss)
                adam_step(self.registry, self.state, lr)
                ious.update(logits, batch.labels)
                losses.add(values, len(batch))
                if gap is not None:
                    gaps.add(gap, len(batch))
            train_secs = time.perf_counter() - t0
            self._emit(epoch, "train", ious.ious(), losses.means(LOSS_KEYS),
                       gaps.means(GAP_KEYS), lr0, train_secs)
            t1 = time.perf_counter()
            with T.no_grad():
                v_ious, v_losses, v_gaps = evaluate_val()
            self._emit(epoch, "val", v_ious, v_losses, v_gaps, lr0, time.perf_counter() - t1)
            val = self.records[-1]
            log.info("%s epoch %d/%d val mIoU %.4f", cfg.run_id, epoch + 1, cfg.epochs, val.miou)
        return self.records

    def _emit(self, epoch, split, ious, losses, gaps, lr, secs):
        self.records.append(MetricsRecord(
            run_id=self.cfg.run_id, mode=self.cfg.mode, epoch=epoch, split=split, ious=ious,
            losses=losses, gaps=gaps, lr=lr,
            seconds=secs if self.cfg.record_time else math.nan))


def _eval_logits(dataset: Dataset, split: str, batch_size: int, logits_fn):
    acc = IoUAccumulator(dataset.config.num_classes)
    seg = RunningMean()
    for batch in dataset.batches(split, batch_size, shuffle=False):
        logits = logits_fn(batch)
        acc.update(logits.data, batch.labels)
        seg.add({"seg": seg_loss(logits, batch.labels).item()}, len(batch))
    return acc.ious(), seg


def _losses_seg_only(seg: RunningMean) -> dict[str, float]:
    out = _nan_losses()
    out["seg"] = out["total"] = seg.means(("seg",))["seg"]
    return out


def _seg_values(loss: T.Tensor) -> dict[str, float]:
    v = loss.item()
    return {"seg": v, "total": v}


# -- runs -------------------------------------------------------------------


def train_teacher(cfg: TrainConfig, dataset: Dataset, out_dir=None) -> RunResult:
    """Pre-train the fusion teacher on segmentation loss, then freeze it."""
    cfg = dataclasses.replace(cfg, mode="teacher")
    teacher = TeacherModel(model_config_for(dataset, cfg.channels, cfg.init), seed=cfg.seed)
    run = _Run(cfg, dataset, teacher.params)

    def step(batch):
        logits = forward_teacher(teacher, batch.lidar, batch.camera, distill=False)[-1]
        loss = seg_loss(logits, batch.labels, soft_dice=cfg.soft_dice)
        return loss, logits.data, _seg_values(loss), None

    def val():
        ious, seg = _eval_logits(dataset, "val", cfg.batch_size,
                                 lambda b: forward_teacher(teacher, b.lidar, b.camera)[-1])
        return ious, _losses_seg_only(seg), {k: math.nan for k in GAP_KEYS}

    records = run.fit(step, val)
    teacher.freeze()
    return _finish(cfg, dataset, records, out_dir, {"teacher": teacher.params}, teacher=teacher)


def train_baseline(cfg: TrainConfig, dataset: Dataset, out_dir=None) -> RunResult:
    """Camera-only student trained on segmentation loss alone."""
    cfg = dataclasses.replace(cfg, mode="baseline")
    student = StudentModel(model_config_for(dataset, cfg.channels, cfg.init), seed=cfg.seed)
    run = _Run(cfg, dataset, student.params)

    def step(batch):
        logits = forward_student(student, batch.camera)[-1]
        loss = seg_loss(logits, batch.labels, soft_dice=cfg.soft_dice)
        return loss, logits.data, _seg_values(loss), None

    def val():
        ious, seg = _eval_logits(dataset, "val", cfg.batch_size,
                                 lambda b: forward_student(student, b.camera)[-1])
        return ious, _losses_seg_only(seg), {k: math.nan for k in GAP_KEYS}

    records = run.fit(step, val)
    return _finish(cfg, dataset, records, out_dir, {"student": student.params}, student=student)


def load_teacher(path, config: ModelConfig) -> TeacherModel:
    path = Path(path)
    if not path.exists():
        raise PreconditionError(f"teacher checkpoint not found: {path}")
    teacher = TeacherModel(config)
    teacher.load(load_checkpoint(path, frozen=True))
    teacher.freeze()
    return teacher


def distill(cfg: TrainConfig, dataset: Dataset, teacher_ckpt, out_dir=None) -> RunResult:
    """Train the student (and assistant) against a frozen teacher.

    ``mode="bridgeta"`` uses the dual-path losses through the assistant;
    ``mode="no_ta"`` replaces every level with direct teacher-student MSE and
    keeps only the teacher cross-head KL term.
    """
    if cfg.mode not in ("bridgeta", "no_ta"):
        raise ShapeError(f"distill needs mode bridgeta or no_ta, got {cfg.mode!r}")
    mcfg = model_config_for(dataset, cfg.channels, cfg.init)
    teacher = load_teacher(teacher_ckpt, mcfg)
    student = StudentModel(mcfg, seed=cfg.seed)
    use_ta = cfg.mode == "bridgeta"
    ta = TAModule(mcfg, seed=cfg.seed, teacher=teacher if cfg.ta_init_from_teacher else None) if use_ta else None
    registry = ParamRegistry().update(student.params)
    if ta is not None:
        registry.update(ta.params)
    run = _Run(cfg, dataset, registry)

    def objective(bundle, labels):
        lb = total_loss(bundle, labels, cfg.weights, cfg.levels, use_ta=use_ta, soft_dice=cfg.soft_dice)
        loss = lb.total
        if use_ta and cfg.ta_seg_supervision:
            loss = T.add(loss, seg_loss(bundle.L_TATA, labels))
        return lb, loss

    def step(batch):
        bundle = full_distill_forward(teacher, ta, student, batch)
        lb, loss = objective(bundle, batch.labels)
        values = lb.values()
        values["total"] = loss.item()
        return loss, bundle.L_SS.data, values, _gaps(bundle)

    def val():
        acc = IoUAccumulator(dataset.config.num_classes)
        losses = RunningMean()
        gaps = RunningMean()
        for batch in dataset.batches("val", cfg.batch_size, shuffle=False):
            bundle = full_distill_forward(teacher, ta, student, batch)
            lb, loss = objective(bundle, batch.labels)
            values = lb.values()
            values["total"] = loss.item()
            acc.update(bundle.L_SS.data, batch.labels)
            losses.add(values, len(batch))
            gaps.add(_gaps(bundle), len(batch))
        return acc.ious(), losses.means(LOSS_KEYS), gaps.means(GAP_KEYS)

    records = run.fit(step, val)
    regs = {"student": student.params}
    if ta is not None:
        regs["ta"] = ta.params
    return _finish(cfg, dataset, records, out_dir, regs, teacher=teacher, student=student, ta=ta,
                   extra={"teacher_checkpoint": str(teacher_ckpt)})


def student_from_checkpoint(reg: ParamRegistry, height: int, width: int) -> StudentModel:
    """Rebuild a student whose shape matches the stored registry."""
    try:
        head = reg["student.head.0.kernel"]
    except KeyError as exc:
        raise ShapeError("checkpoint holds no student parameters") from exc
    enc = sum(1 for n in reg.names() if n.startswith("student.camera_encoder.") and n.endswith(".kernel"))
    dec = sum(1 for n in reg.names() if n.startswith("student.decoder.") and n.endswith(".kernel"))
    k = reg["student.camera_encoder.0.kernel"].shape[-1]
    mcfg = ModelConfig(channels=head.shape[1], num_classes=head.shape[0], height=height, width=width,
                       encoder_depth=enc, decoder_depth=dec, kernel_size=k)
    student = StudentModel(mcfg)
    student.load(reg)
    return student


def evaluate(checkpoint, dataset: Dataset, split: str = "val", batch_size: int = 6,
             run_id: str = "eval") -> MetricsRecord:
    """IoU of a student checkpoint through the plain camera-only path."""
    reg = load_checkpoint(checkpoint)
    student = student_from_checkpoint(reg, dataset.config.height, dataset.config.width)
    with T.no_grad():
        ious, seg = _eval_logits(dataset, split, batch_size,
                                 lambda b: forward_student(student, b.camera)[-1])
    return MetricsRecord(run_id=run_id, mode="eval", epoch=-1, split=split, ious=ious,
                         losses=_losses_seg_only(seg), gaps={k: math.nan for k in GAP_KEYS})


def _finish(cfg, dataset, records, out_dir, registries, extra=None, **models) -> RunResult:
    checkpoints: dict[str, str] = {}
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, reg in registries.items():
            path = out / f"{name}.ckpt"
            save_checkpoint(reg, path)
            checkpoints[name] = path.name
        write_metrics_csv(out / "metrics.csv", records)
        final = [r for r in records if r.split == "val"][-1]
        manifest = {
            "run_id": cfg.run_id,
            "version": __version__,
            "config": cfg.to_dict(),
            "dataset_hash": dataset.content_hash,
            "checkpoints": checkpoints,
            "gap_split": "val",
            "final": {"epoch": final.epoch, "miou": final.miou, "ious": final.ious,
                      "gaps": final.gaps},
        }
        manifest.update(extra or {})
        with open(out / "run_manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, allow_nan=True)
            fh.write("\n")
    return RunResult(cfg, records, checkpoints, out, **models)


def run_mode(cfg: TrainConfig, dataset: Dataset, out_dir=None, teacher_ckpt=None) -> RunResult:
    if cfg.mode == "teacher":
        return train_teacher(cfg, dataset, out_dir)
    if cfg.mode == "baseline":
        return train_baseline(cfg, dataset, out_dir)
    if teacher_ckpt is None:
        raise PreconditionError("distillation needs a teacher checkpoint")
    return distill(cfg, dataset, teacher_ckpt, out_dir)


def run_benchmark(data_dir, out_root, seeds=(1, 2, 3), base: Optional[TrainConfig] = None) -> dict:
    """Teacher, baseline, no-assistant and full distillation runs for each seed.

    Returns ``{seed: {mode: RunResult}}``; run directories are
    ``<out_root>/<mode>-seed<seed>``.
    """
    base = base or TrainConfig()
    dataset = load_dataset(data_dir)
    out_root = Path(out_root)
    results: dict[int, dict[str, RunResult]] = {}
    for seed in seeds:
        per: dict[str, RunResult] = {}
        for mode in MODES:
            cfg = dataclasses.replace(base, mode=mode, seed=seed)
            ckpt = out_root / f"teacher-seed{seed}" / "teacher.ckpt"
            per[mode] = run_mode(cfg, dataset, out_root / cfg.run_id, teacher_ckpt=ckpt)
        results[seed] = per
    return results


def median(values) -> float:
    return float(np.median(np.asarray(list(values), dtype=np.float64)))
