"""Layers, parameter registry, Adam, cosine schedule and checkpoint I/O."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError, ShapeError
from .tensor import Tensor


INIT_SCALE = {"he_uniform": 6.0, "fan_in_uniform": 1.0}


class ConvLayer:
    """conv2d followed by an optional ReLU."""

    def __init__(self, kernel: Tensor, bias: Tensor, padding: Optional[int] = None,
                 activation: str = "relu"):
        if activation not in ("relu", "none"):
            raise ShapeError(f"unknown activation {activation!r}")
        self.kernel = kernel
        self.bias = bias
        k = kernel.shape[-1]
        self.padding = (k - 1) // 2 if padding is None else int(padding)
        self.activation = activation

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int,
             activation: str = "relu", scheme: str = "he_uniform") -> "ConvLayer":
        """Uniform kernels in [-s, s] and zero bias.

        ``he_uniform``: s = sqrt(6 / fan_in), variance-preserving through ReLU.
        ``fan_in_uniform``: s = sqrt(1 / fan_in), which shrinks activations
        roughly 0.4x per ReLU layer.
        """
        if scheme not in INIT_SCALE:
            raise ShapeError(f"unknown init scheme {scheme!r}")
        s = math.sqrt(INIT_SCALE[scheme] / (c_in * k * k))
        kernel = Tensor(rng.uniform(-s, s, size=(c_out, c_in, k, k)), requires_grad=True)
        bias = Tensor(np.zeros(c_out), requires_grad=True)
        return cls(kernel, bias, activation=activation)

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}

    def mult_count(self, h: int, w: int) -> int:
        """Multiplies in one forward at an H x W output size."""
        c_out, c_in, k, _ = self.kernel.shape
        return c_out * c_in * k * k * h * w

    def __call__(self, x: Tensor) -> Tensor:
        return forward_layer(self, x)


def forward_layer(layer: ConvLayer, x: Tensor) -> Tensor:
    y = T.conv2d(x, layer.kernel, layer.bias, layer.padding)
    return T.relu(y) if layer.activation == "relu" else y


class ParamRegistry:
    """Insertion-ordered name -> Tensor map with a per-entry frozen flag.

    Freezing clears ``requires_grad`` so the tape never accumulates into the
    tensor, and the optimizer skips it.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def register(self, name: str, t: Tensor, frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise ShapeError(f"duplicate parameter name {name!r}")
        self._entries[name] = t
        self._frozen[name] = False
        if frozen:
            self.freeze(name)
        else:
            t.requires_grad = True
        return t

    def register_layer(self, prefix: str, layer: ConvLayer, frozen: bool = False) -> None:
        for key, t in layer.params().items():
            self.register(f"{prefix}.{key}", t, frozen=frozen)

    def update(self, other: "ParamRegistry") -> "ParamRegistry":
        for name, t in other.items():
            self.register(name, t, frozen=other.is_frozen(name))
        return self

    def freeze(self, name: Optional[str] = None) -> None:
        names = list(self._entries) if name is None else [name]
        for n in names:
            self._frozen[n] = True
            t = self._entries[n]
            t.requires_grad = False
            t.grad = None

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._entries.items() if not self._frozen[n])

    def zero_grad(self) -> None:
        for _, t in self.trainable():
            t.grad = np.zeros_like(t.data)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}


def param_count(registry: ParamRegistry, frozen_included: bool = True) -> int:
    return int(sum(t.size for n, t in registry.items()
                   if frozen_included or not registry.is_frozen(n)))


# -- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(registry: ParamRegistry, state: AdamState, lr: float) -> None:
    """One Adam update over the unfrozen entries, then zero their grads."""
    trainable = list(registry.trainable())
    for name, t in trainable:
        if t.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in trainable:
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        t.grad = np.zeros_like(t.data)


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float
    total_epochs: int
    min_lr: float = 0.0


def lr_at(schedule: CosineSchedule, epoch: float) -> float:
    if not 0.0 <= epoch <= schedule.total_epochs:
        raise ShapeError(f"lr_at: epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch == schedule.total_epochs:
        return schedule.min_lr
    frac = epoch / schedule.total_epochs
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * frac))


# -- checkpoints ------------------------------------------------------------
#
# little-endian: b"BTCK", u32 version, u32 count, then per entry
# u16 name_len, name (utf-8), u8 frozen, u8 rank, u32 dims[rank], f64 data[...]

CKPT_MAGIC = b"BTCK"
CKPT_VERSION = 1


def save_checkpoint(registry: ParamRegistry, path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(registry))]
    for name, t in registry.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", int(registry.is_frozen(name)), t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, frozen: Optional[bool] = None) -> ParamRegistry:
    """Read a checkpoint. ``frozen`` overrides the stored per-entry flags."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("checkpoint magic: expected b'BTCK'")
    (version,) = rd.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version: expected {CKPT_VERSION}, got {version}")
    (count,) = rd.unpack("<I", "entry count")
    entries = []
    for i in range(count):
        (nlen,) = rd.unpack("<H", f"entry {i} name length")
        try:
            name = rd.take(nlen, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"checkpoint entry {i} name: invalid utf-8") from exc
        flag, rank = rd.unpack("<BB", f"{name} frozen flag/rank")
        dims = rd.unpack(f"<{rank}I", f"{name} dims")
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(rd.take(8 * n, f"{name} data"), dtype="<f8").astype(np.float64)
        entries.append((name, bool(flag), data.reshape(dims)))
    if rd.pos != len(rd.buf):
        raise FormatError("checkpoint has trailing bytes after last entry")
    reg = ParamRegistry()
    for name, flag, data in entries:
        reg.register(name, Tensor(data), frozen=flag if frozen is None else frozen)
    return reg
