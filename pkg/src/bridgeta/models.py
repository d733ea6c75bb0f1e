"""Teacher (geometry + camera), camera-only student, and the assistant.

The assistant has no encoder of its own: it fuses the teacher's geometric
BEV feature with the student's camera BEV feature, then runs a decoder and
head with the same architecture as the other two networks.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import ConvLayer, ParamRegistry, forward_layer
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    num_classes: int = 4
    height: int = 32
    width: int = 32
    encoder_depth: int = 2
    decoder_depth: int = 2
    kernel_size: int = 3
    init: str = "he_uniform"

    def __post_init__(self):
        if self.channels < 1 or self.num_classes < 1:
            raise ShapeError("channels and num_classes must be positive")
        if self.kernel_size % 2 != 1:
            raise ShapeError("kernel_size must be odd")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ShapeError("encoder and decoder need at least one layer")


def _encoder(rng, c_in: int, cfg: ModelConfig) -> list[ConvLayer]:
    layers = [ConvLayer.init(rng, c_in, cfg.channels, cfg.kernel_size, scheme=cfg.init)]
    for _ in range(cfg.encoder_depth - 1):
        layers.append(ConvLayer.init(rng, cfg.channels, cfg.channels, cfg.kernel_size, scheme=cfg.init))
    return layers


def _decoder(rng, cfg: ModelConfig) -> list[ConvLayer]:
    return [ConvLayer.init(rng, cfg.channels, cfg.channels, cfg.kernel_size, scheme=cfg.init)
            for _ in range(cfg.decoder_depth)]


def _head(rng, cfg: ModelConfig) -> ConvLayer:
    return ConvLayer.init(rng, cfg.channels, cfg.num_classes, 1, activation="none", scheme=cfg.init)


def _run(layers: list[ConvLayer], x: Tensor) -> Tensor:
    for layer in layers:
        x = forward_layer(layer, x)
    return x


def _register_stack(reg: ParamRegistry, prefix: str, layers: list[ConvLayer]) -> None:
    for i, layer in enumerate(layers):
        reg.register_layer(f"{prefix}.{i}", layer)


class _Model:
    """Holds conv stacks plus a registry named ``<prefix>.<group>.<i>.<kernel|bias>``."""

    prefix: str
    config: ModelConfig
    params: ParamRegistry

    def layer_groups(self) -> dict[str, list[ConvLayer]]:
        raise NotImplementedError

    def _build_registry(self) -> None:
        reg = ParamRegistry()
        for group, layers in self.layer_groups().items():
            _register_stack(reg, f"{self.prefix}.{group}", layers)
        self.params = reg

    def freeze(self) -> None:
        self.params.freeze()

    def load(self, reg: ParamRegistry) -> None:
        """Copy values from ``reg`` into this model's tensors (shape-checked)."""
        mine = self.params
        if set(mine.names()) != set(reg.names()):
            missing = sorted(set(mine.names()) - set(reg.names()))
            extra = sorted(set(reg.names()) - set(mine.names()))
            raise ShapeError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, t in mine.items():
            src = reg[name]
            if src.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {t.shape}")
            t.data = src.data.copy()

    def mult_count(self) -> int:
        h, w = self.config.height, self.config.width
        return sum(l.mult_count(h, w) for ls in self.layer_groups().values() for l in ls)


class TeacherModel(_Model):
    prefix = "teacher"

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng([int(seed), 0])
        self.config = config
        self.lidar_encoder = _encoder(rng, 1, config)
        self.camera_encoder = _encoder(rng, 3, config)
        self.fuser = ConvLayer.init(rng, 2 * config.channels, config.channels, config.kernel_size,
                                    scheme=config.init)
        self.decoder = _decoder(rng, config)
        self.head = _head(rng, config)
        self._build_registry()

    def layer_groups(self):
        return {
            "lidar_encoder": self.lidar_encoder,
            "camera_encoder": self.camera_encoder,
            "fuser": [self.fuser],
            "decoder": self.decoder,
            "head": [self.head],
        }


class StudentModel(_Model):
    prefix = "student"

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng([int(seed), 1])
        self.config = config
        self.camera_encoder = _encoder(rng, 3, config)
        self.decoder = _decoder(rng, config)
        self.head = _head(rng, config)
        self._build_registry()

    def layer_groups(self):
        return {"camera_encoder": self.camera_encoder, "decoder": self.decoder, "head": [self.head]}


class TAModule(_Model):
    prefix = "ta"

    def __init__(self, config: ModelConfig, seed: int = 0,
                 teacher: Optional[TeacherModel] = None):
        """Fuser is always random; decoder and head copy ``teacher`` when given."""
        rng = np.random.default_rng([int(seed), 2])
        self.config = config
        self.fuser = ConvLayer.init(rng, 2 * config.channels, config.channels, config.kernel_size,
                                    scheme=config.init)
        self.decoder = _decoder(rng, config)
        self.head = _head(rng, config)
        if teacher is not None:
            for mine, theirs in zip(self.decoder + [self.head], teacher.decoder + [teacher.head]):
                mine.kernel.data = theirs.kernel.data.copy()
                mine.bias.data = theirs.bias.data.copy()
        self._build_registry()

    def layer_groups(self):
        return {"fuser": [self.fuser], "decoder": self.decoder, "head": [self.head]}


def check_compatible(teacher: TeacherModel, ta: Optional[TAModule], student: StudentModel) -> None:
    """Channel equality across the three networks at every distilled level."""
    cfgs = [teacher.config, student.config] + ([ta.config] if ta is not None else [])
    ref = cfgs[0]
    for c in cfgs[1:]:
        if (c.channels, c.num_classes, c.height, c.width) != (ref.channels, ref.num_classes, ref.height, ref.width):
            raise ShapeError(f"incompatible model configs {ref} vs {c}")


@dataclass
class ForwardBundle:
    F_lid_T: Optional[Tensor] = None
    F_cam_T: Optional[Tensor] = None
    F_fus_T: Optional[Tensor] = None
    F_dec_T: Optional[Tensor] = None
    L_TT: Optional[Tensor] = None
    F_cam_S: Optional[Tensor] = None
    F_dec_S: Optional[Tensor] = None
    L_SS: Optional[Tensor] = None
    F_fus_TA: Optional[Tensor] = None
    F_dec_TA: Optional[Tensor] = None
    L_TATA: Optional[Tensor] = None
    L_S_T: Optional[Tensor] = None
    L_S_TA: Optional[Tensor] = None

    def is_complete(self) -> bool:
        return all(getattr(self, f.name) is not None for f in fields(self))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_input(x: Tensor, channels: int, cfg: ModelConfig, what: str) -> None:
    if x.shape[-3:] != (channels, cfg.height, cfg.width):
        raise ShapeError(f"{what}: expected (*, {channels}, {cfg.height}, {cfg.width}), got {x.shape}")


def forward_teacher(t: TeacherModel, lidar, camera, distill: bool = True):
    """Returns ``(F_lid, F_cam, F_fus, F_dec, logits)``; detached in distillation mode."""
    lidar, camera = _as_tensor(lidar), _as_tensor(camera)
    _check_input(lidar, 1, t.config, "teacher lidar")
    _check_input(camera, 3, t.config, "teacher camera")
    f_lid = _run(t.lidar_encoder, lidar)
    f_cam = _run(t.camera_encoder, camera)
    f_fus = forward_layer(t.fuser, T.concat_channels([f_lid, f_cam]))
    f_dec = _run(t.decoder, f_fus)
    logits = forward_layer(t.head, f_dec)
    out = (f_lid, f_cam, f_fus, f_dec, logits)
    return tuple(T.detach(x) for x in out) if distill else out


def forward_student(s: StudentModel, camera):
    """Camera-only inference path: ``(F_cam, F_dec, logits)``."""
    camera = _as_tensor(camera)
    _check_input(camera, 3, s.config, "student camera")
    f_cam = _run(s.camera_encoder, camera)
    f_dec = _run(s.decoder, f_cam)
    return f_cam, f_dec, forward_layer(s.head, f_dec)


def forward_ta(ta: TAModule, f_lid_t: Tensor, f_cam_s: Tensor):
    if f_lid_t.shape != f_cam_s.shape:
        raise ShapeError(f"assistant inputs differ in shape: {f_lid_t.shape} vs {f_cam_s.shape}")
    _check_input(f_cam_s, ta.config.channels, ta.config, "assistant input")
    f_fus = forward_layer(ta.fuser, T.concat_channels([T.detach(f_lid_t), f_cam_s]))
    f_dec = _run(ta.decoder, f_fus)
    return f_fus, f_dec, forward_layer(ta.head, f_dec)


def _conduit(head: ConvLayer, x: Tensor) -> Tensor:
    """Apply ``head`` with its weights detached so gradient reaches only ``x``."""
    if x.shape[-3] != head.c_in:
        raise ShapeError(f"cross-head input has {x.shape[-3]} channels, head expects {head.c_in}")
    return T.conv2d(x, T.detach(head.kernel), T.detach(head.bias), head.padding)


def cross_head_forward(teacher_head: ConvLayer, ta_head: Optional[ConvLayer], f_dec_s: Tensor):
    l_s_t = _conduit(teacher_head, f_dec_s)
    l_s_ta = _conduit(ta_head, f_dec_s) if ta_head is not None else None
    return l_s_t, l_s_ta


def full_distill_forward(teacher: TeacherModel, ta: Optional[TAModule], student: StudentModel,
                         batch, distill: bool = True) -> ForwardBundle:
    """One teacher, one assistant and one student forward over ``batch``.

    With ``distill=False`` only the student runs (inference mode). With
    ``ta=None`` the assistant fields stay empty (the no-assistant ablation).
    """
    camera = _as_tensor(batch.camera)
    if not distill:
        f_cam_s, f_dec_s, l_ss = forward_student(student, camera)
        return ForwardBundle(F_cam_S=f_cam_s, F_dec_S=f_dec_s, L_SS=l_ss)
    check_compatible(teacher, ta, student)
    f_lid_t, f_cam_t, f_fus_t, f_dec_t, l_tt = forward_teacher(teacher, batch.lidar, camera)
    f_cam_s, f_dec_s, l_ss = forward_student(student, camera)
    bundle = ForwardBundle(F_lid_T=f_lid_t, F_cam_T=f_cam_t, F_fus_T=f_fus_t, F_dec_T=f_dec_t,
                           L_TT=l_tt, F_cam_S=f_cam_s, F_dec_S=f_dec_s, L_SS=l_ss)
    if ta is not None:
        bundle.F_fus_TA, bundle.F_dec_TA, bundle.L_TATA = forward_ta(ta, f_lid_t, f_cam_s)
    bundle.L_S_T, bundle.L_S_TA = cross_head_forward(
        teacher.head, ta.head if ta is not None else None, f_dec_s)
    return bundle
