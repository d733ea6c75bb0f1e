"""Procedural BEV scenes with a clean geometric channel and a degraded camera.

Each scene rasterises 1-3 straight road corridors. The geometric ("lidar")
channel encodes class-dependent heights with crisp edges and only suffers
random cell dropout; the appearance ("camera") channels carry class colours
but are blurred, noisy, sometimes darkened, and partly occluded. A model that
sees both inputs therefore has strictly more information than a camera-only
one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import CorruptionError, FormatError, ShapeError

CLASS_NAMES = ("drivable", "divider", "walkway", "stopline")

_HEIGHT = {"drivable": 0.35, "walkway": 0.7, "stopline": 0.5, "divider": 1.0}
_BACKGROUND_RGB = (0.35, 0.45, 0.30)
_RGB = {
    "walkway": (0.55, 0.50, 0.45),
    "drivable": (0.42, 0.42, 0.44),
    "stopline": (0.62, 0.62, 0.60),
    "divider": (0.60, 0.56, 0.36),
}
_PAINT_ORDER = ("walkway", "drivable", "stopline", "divider")

SPLIT_MAGIC = b"BTA1"
SPLIT_VERSION = 1
VAL_SEED_OFFSET = 1_000_000


@dataclass(frozen=True)
class GenConfig:
    height: int = 32
    width: int = 32
    num_classes: int = 4
    camera_channels: int = 3
    lidar_channels: int = 1
    train_scenes: int = 200
    val_scenes: int = 50
    camera_noise_sigma: float = 0.08
    night_probability: float = 0.3
    night_brightness_scale: float = 0.35
    occlusion_patch_count: int = 2
    occlusion_patch_size: int = 8
    lidar_dropout_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ShapeError("grid must be at least 16 x 16")
        if self.num_classes < 2 or self.num_classes > len(CLASS_NAMES):
            raise ShapeError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
        if self.camera_channels != 3 or self.lidar_channels != 1:
            raise ShapeError("only 3 camera channels and 1 lidar channel are supported")
        for name in ("night_probability", "lidar_dropout_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ShapeError(f"{name} must be a probability, got {v}")
        if self.camera_noise_sigma < 0 or self.night_brightness_scale < 0:
            raise ShapeError("noise sigma and brightness scale must be non-negative")
        if self.occlusion_patch_count < 0 or self.occlusion_patch_size < 0:
            raise ShapeError("occlusion parameters must be non-negative")
        if self.train_scenes < 0 or self.val_scenes < 0:
            raise ShapeError("scene counts must be non-negative")

    @property
    def class_names(self) -> tuple:
        return CLASS_NAMES[: self.num_classes]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Scene:
    lidar: np.ndarray  # 1 x H x W
    camera: np.ndarray  # 3 x H x W
    labels: np.ndarray  # N_c x H x W, uint8 in {0, 1}
    night: bool
    scene_id: int


def _corridor_masks(rng: np.random.Generator, h: int, w: int) -> dict[str, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    masks = {name: np.zeros((h, w), dtype=bool) for name in CLASS_NAMES}
    for _ in range(int(rng.integers(1, 4))):
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        theta = rng.uniform(0.0, np.pi)
        half_width = rng.uniform(3.0, 5.5)
        ux, uy = np.cos(theta), np.sin(theta)
        along = (xx - cx) * ux + (yy - cy) * uy
        across = -(xx - cx) * uy + (yy - cy) * ux
        dist = np.abs(across)
        road = dist < half_width
        masks["drivable"] |= road
        masks["divider"] |= dist < 0.6
        masks["walkway"] |= (dist >= half_width) & (dist < half_width + 2.0)
        for _ in range(int(rng.integers(0, 3))):
            t0 = rng.uniform(-0.4, 0.4) * max(h, w)
            masks["stopline"] |= road & (np.abs(along - t0) < 1.0) & (dist > 0.6)
    masks["walkway"] &= ~masks["drivable"]
    return masks


def _blur3(img: np.ndarray) -> np.ndarray:
    """Separable [1, 2, 1] / 4 Gaussian blur with edge padding, per channel."""
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    v = (p[:, :-2, :] + 2.0 * p[:, 1:-1, :] + p[:, 2:, :]) / 4.0
    return (v[:, :, :-2] + 2.0 * v[:, :, 1:-1] + v[:, :, 2:]) / 4.0


def clean_lidar(labels: np.ndarray, class_names) -> np.ndarray:
    """Height map of the label union with crisp edges (before dropout)."""
    h, w = labels.shape[1:]
    lidar = np.zeros((1, h, w))
    for name in _PAINT_ORDER:
        if name in class_names:
            m = labels[class_names.index(name)].astype(bool)
            lidar[0][m] = _HEIGHT[name]
    return lidar


def generate_scene(config: GenConfig, scene_seed: int) -> Scene:
    rng = np.random.default_rng([int(config.seed), int(scene_seed)])
    h, w = config.height, config.width
    names = config.class_names
    masks = _corridor_masks(rng, h, w)
    labels = np.stack([masks[n] for n in names]).astype(np.uint8)

    lidar = clean_lidar(labels, names)
    if config.lidar_dropout_rate > 0:
        drop = rng.random((h, w)) < config.lidar_dropout_rate
        lidar[0][drop] = 0.0

    camera = np.empty((3, h, w))
    camera[:] = np.asarray(_BACKGROUND_RGB)[:, None, None]
    for name in _PAINT_ORDER:
        if name in names:
            m = masks[name]
            camera[:, m] = np.asarray(_RGB[name])[:, None]
    camera = _blur3(camera)
    sigma = config.camera_noise_sigma
    night = bool(rng.random() < config.night_probability)
    if night:
        camera *= config.night_brightness_scale
        sigma *= 2.0
    camera += rng.normal(0.0, 1.0, size=camera.shape) * sigma
    size = config.occlusion_patch_size
    for _ in range(config.occlusion_patch_count):
        if size == 0:
            break
        top = int(rng.integers(0, max(1, h - size + 1)))
        left = int(rng.integers(0, max(1, w - size + 1)))
        camera[:, top:top + size, left:left + size] = 0.5
    camera = np.clip(camera, 0.0, 1.0)

    # round-trip through f32 so in-memory scenes equal what the split file holds
    return Scene(
        lidar=lidar.astype(np.float32).astype(np.float64),
        camera=camera.astype(np.float32).astype(np.float64),
        labels=labels,
        night=night,
        scene_id=int(scene_seed),
    )


# -- split files ------------------------------------------------------------


def write_split(path, scenes: list[Scene], config: GenConfig) -> None:
    h, w, nc = config.height, config.width, config.num_classes
    parts = [SPLIT_MAGIC, struct.pack("<IIHHH", SPLIT_VERSION, len(scenes), h, w, nc)]
    for s in scenes:
        parts.append(struct.pack("<QB", s.scene_id, int(s.night)))
        parts.append(s.lidar.astype("<f4").tobytes())
        parts.append(s.camera.astype("<f4").tobytes())
        parts.append(s.labels.astype(np.uint8).tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise OSError(f"could not write split file {path}: {exc}") from exc


def read_split(path) -> list[Scene]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing split file {path}") from exc
    if buf[:4] != SPLIT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    head = struct.calcsize("<IIHHH")
    if len(buf) < 4 + head:
        raise FormatError(f"{path}: truncated header")
    version, count, h, w, nc = struct.unpack_from("<IIHHH", buf, 4)
    if version != SPLIT_VERSION:
        raise FormatError(f"{path}: version {version} != {SPLIT_VERSION}")
    rec = 9 + 4 * h * w + 4 * 3 * h * w + nc * h * w
    pos = 4 + head
    if len(buf) != pos + count * rec:
        raise FormatError(f"{path}: expected {count} scenes of {rec} bytes")
    scenes = []
    for _ in range(count):
        sid, night = struct.unpack_from("<QB", buf, pos)
        pos += 9
        lidar = np.frombuffer(buf, "<f4", h * w, pos).reshape(1, h, w).astype(np.float64)
        pos += 4 * h * w
        camera = np.frombuffer(buf, "<f4", 3 * h * w, pos).reshape(3, h, w).astype(np.float64)
        pos += 12 * h * w
        labels = np.frombuffer(buf, np.uint8, nc * h * w, pos).reshape(nc, h, w).copy()
        pos += nc * h * w
        scenes.append(Scene(lidar, camera, labels, bool(night), int(sid)))
    return scenes


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_dataset(config: GenConfig, out_dir) -> dict:
    """Write ``train.bin``, ``val.bin`` and ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"could not create dataset directory {out}: {exc}") from exc
    splits = {
        "train": [generate_scene(config, i) for i in range(config.train_scenes)],
        "val": [generate_scene(config, VAL_SEED_OFFSET + i) for i in range(config.val_scenes)],
    }
    manifest = {
        "format": "BTA1",
        "config": config.to_dict(),
        "class_names": list(config.class_names),
        "counts": {k: len(v) for k, v in splits.items()},
        "class_positive_rates": {},
        "sha256": {},
    }
    for split, scenes in splits.items():
        path = out / f"{split}.bin"
        write_split(path, scenes, config)
        manifest["sha256"][split] = _sha256(path)
        if scenes:
            lab = np.stack([s.labels for s in scenes]).astype(np.float64)
            rates = lab.mean(axis=(0, 2, 3))
            manifest["class_positive_rates"][split] = {
                n: round(float(r), 8) for n, r in zip(config.class_names, rates)
            }
    digest = hashlib.sha256()
    for split in ("train", "val"):
        digest.update(manifest["sha256"][split].encode())
    manifest["content_hash"] = digest.hexdigest()
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# -- loading ----------------------------------------------------------------


@dataclass
class Batch:
    lidar: np.ndarray  # N x 1 x H x W
    camera: np.ndarray  # N x 3 x H x W
    labels: np.ndarray  # N x N_c x H x W, float64 in {0, 1}
    scene_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.lidar.shape[0]


def make_batch(scenes: list[Scene]) -> Batch:
    return Batch(
        lidar=np.stack([s.lidar for s in scenes]),
        camera=np.stack([s.camera for s in scenes]),
        labels=np.stack([s.labels for s in scenes]).astype(np.float64),
        scene_ids=[s.scene_id for s in scenes],
    )


class Dataset:
    def __init__(self, root, manifest: dict, splits: dict[str, list[Scene]]):
        self.root = Path(root)
        self.manifest = manifest
        self.splits = splits
        self.config = GenConfig.from_dict(manifest["config"])

    @property
    def content_hash(self) -> str:
        return self.manifest["content_hash"]

    def scenes(self, split: str) -> list[Scene]:
        if split not in self.splits:
            raise FormatError(f"dataset has no split {split!r}")
        return self.splits[split]

    def batches(self, split: str, batch_size: int, seed: Optional[int] = None,
                epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
        """Yield batches; shuffled order is a pure function of (seed, epoch)."""
        scenes = self.scenes(split)
        order = np.arange(len(scenes))
        if shuffle:
            order = np.random.default_rng([int(seed or 0), int(epoch)]).permutation(len(scenes))
        for start in range(0, len(order), batch_size):
            yield make_batch([scenes[i] for i in order[start:start + batch_size]])


def load_dataset(data_dir, verify: bool = True) -> Dataset:
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"missing manifest {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    splits = {}
    for split in ("train", "val"):
        path = root / f"{split}.bin"
        if not path.exists():
            raise FormatError(f"missing split file {path}")
        if verify and _sha256(path) != manifest["sha256"].get(split):
            raise CorruptionError(f"{path}: sha256 does not match manifest")
        splits[split] = read_split(path)
    return Dataset(root, manifest, splits)


def load_gen_config(path) -> GenConfig:
    with open(path) as fh:
        return GenConfig.from_dict(json.load(fh))
