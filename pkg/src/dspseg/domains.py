"""Paired procedural segmentation domains with a long-tail class distribution.

Scenes are horizontal ground/road/sky bands plus randomly placed shapes:
rectangles (building, vehicle), an ellipse (person), a triangle (sign) and a
two-circle glyph (bike).  Later shapes overwrite earlier labels.  The same
scene recipe renders under two appearance styles (palette, hue rotation,
gamma, noise, texture), which is the only difference between the source and
target splits.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

CLASS_NAMES = ("background", "ground", "road", "building", "vehicle", "person", "sign", "bike")
CLASS_COUNT = len(CLASS_NAMES)
IGNORE_LABEL = 255

SPLIT_SOURCE = "source"
SPLIT_TARGET_TRAIN = "target_train"
SPLIT_TARGET_EVAL = "target_eval"
SPLITS = (SPLIT_SOURCE, SPLIT_TARGET_TRAIN, SPLIT_TARGET_EVAL)

# Head classes are brightness-coded grays: hue rotation (about the gray axis)
# leaves them fixed, so tone is their only appearance cue.  The gray levels are
# deliberately aliased across the two domain tone curves — a head class
# rendered under the source gamma lands on (or near) the *next* class rendered
# under the target gamma (ground→road exactly, building→ground, sky→building).
# Source content pasted into a target frame at full opacity therefore mimics a
# different target class, unless the paste blends in local target appearance.
# The three rare classes are strongly saturated, so the hue rotation displaces
# them far from their source colors — recognizing them on the target side is
# the genuinely hard part of the benchmark.
BASE_PALETTE = (
    (0.88, 0.88, 0.88),  # background / sky
    (0.565, 0.565, 0.565),  # ground
    (0.34, 0.34, 0.34),  # road
    (0.72, 0.72, 0.72),  # building
    (0.19, 0.19, 0.19),  # vehicle
    (0.85, 0.30, 0.68),  # person
    (0.95, 0.85, 0.20),  # sign
    (0.22, 0.20, 0.62),  # bike
)


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    class_count: int = CLASS_COUNT
    # per-class probability that the class is spawned in a scene; classes
    # 5..7 (person, sign, bike) are deliberately rare
    spawn_probs: tuple[float, ...] = (1.0, 1.0, 0.95, 0.75, 0.60, 0.15, 0.10, 0.08)

    def validate(self) -> None:
        if self.size <= 0 or self.size % 4:
            raise ConfigError(f"scene.size must be a positive multiple of 4, got {self.size}")
        if len(self.spawn_probs) != self.class_count:
            raise ConfigError(
                f"scene.spawn_probs needs {self.class_count} entries, got {len(self.spawn_probs)}"
            )
        for i, p in enumerate(self.spawn_probs):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"scene.spawn_probs[{i}] must be in [0,1], got {p}")


@dataclass(frozen=True)
class DomainStyle:
    palette: tuple[tuple[float, float, float], ...] = BASE_PALETTE
    hue_rotation: float = 0.0  # radians, about the gray axis
    gamma: float = 1.0
    noise_amplitude: float = 0.02
    texture_freq: float = 3.0
    texture_amplitude: float = 0.10

    def validate(self) -> None:
        if self.gamma <= 0:
            raise ConfigError(f"style.gamma must be positive, got {self.gamma}")
        if self.noise_amplitude < 0:
            raise ConfigError(f"style.noise_amplitude must be >= 0, got {self.noise_amplitude}")


# The two styles differ along every photometric axis: the source renders
# dark-toned, nearly flat and clean, the target bright-toned, heavily
# textured and noisy, with a moderate hue rotation on top.  Pixels pasted
# from the source therefore sit visibly outside the target's appearance
# unless the paste blends in some of the local target context.
SOURCE_STYLE = DomainStyle(
    gamma=1.42,
    noise_amplitude=0.01,
    texture_freq=3.0,
    texture_amplitude=0.04,
)
TARGET_STYLE = DomainStyle(
    hue_rotation=0.55,
    gamma=0.75,
    noise_amplitude=0.04,
    texture_freq=6.0,
    texture_amplitude=0.14,
)


@dataclass
class DatasetItem:
    item_id: str
    split: str
    image: np.ndarray  # (H,W,3) float32 in [0,1]
    label: np.ndarray | None  # (H,W) uint8, None for target_train


# ---------------------------------------------------------------------------
# scene layout
# ---------------------------------------------------------------------------


def _draw_layout(scene: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    s = scene.size
    label = np.zeros((s, s), dtype=np.uint8)
    yy, xx = np.mgrid[0:s, 0:s]
    p = scene.spawn_probs

    ground_top = int(s * rng.uniform(0.50, 0.66))
    if rng.random() < p[1]:
        label[ground_top:, :] = 1

    road_top = road_bot = None
    if rng.random() < p[2]:
        road_top = ground_top + int((s - ground_top) * rng.uniform(0.10, 0.35))
        road_h = max(3, int((s - ground_top) * rng.uniform(0.25, 0.45)))
        road_bot = min(s, road_top + road_h)
        label[road_top:road_bot, :] = 2

    if rng.random() < p[3]:
        for _ in range(rng.integers(1, 4)):
            bw = int(rng.uniform(9, 20))
            bh = int(rng.uniform(12, 30))
            bx = int(rng.uniform(0, s - bw))
            label[max(0, ground_top - bh) : ground_top, bx : bx + bw] = 3

    if rng.random() < p[4]:
        for _ in range(rng.integers(1, 3)):
            vw = int(rng.uniform(9, 15))
            vh = int(rng.uniform(4, 8))
            base = road_bot if road_bot is not None else min(s, ground_top + 8)
            vy = int(np.clip(base - vh - rng.integers(0, 3), 0, s - vh))
            vx = int(rng.uniform(0, s - vw))
            label[vy : vy + vh, vx : vx + vw] = 4

    if rng.random() < p[5]:
        cx = rng.uniform(6, s - 6)
        cy = rng.uniform(ground_top - 2, s - 12)
        rx = rng.uniform(3.5, 5.5)
        ry = rng.uniform(7.0, 11.0)
        label[((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0] = 5

    if rng.random() < p[6]:
        half = rng.uniform(5.5, 8.5)
        cx = rng.uniform(half + 1, s - half - 1)
        cy = rng.uniform(10, ground_top)
        height = 2.0 * half
        # upward triangle: widens linearly from the apex
        rel = (yy - (cy - half)) / height
        tri = (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * half)
        label[tri] = 6

    if rng.random() < p[7]:
        r = rng.uniform(3.5, 5.0)
        gap = 2.2 * r
        cx = rng.uniform(r + 1, s - gap - r - 1)
        cy = rng.uniform(ground_top + r + 1, s - r - 1)
        wheels = ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r) | (
            (xx - cx - gap) ** 2 + (yy - cy) ** 2 <= r * r
        )
        frame = (np.abs(yy - (cy - r * 0.4)) <= 1.5) & (xx >= cx) & (xx <= cx + gap)
        label[wheels | frame] = 7

    return label


# ---------------------------------------------------------------------------
# appearance rendering
# ---------------------------------------------------------------------------


def _hue_matrix(theta: float) -> np.ndarray:
    """Rotation about the RGB gray axis (1,1,1)/sqrt(3)."""
    axis = np.ones(3) / math.sqrt(3.0)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def _render(label: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    s = label.shape[0]
    palette = np.asarray(style.palette, dtype=np.float64)
    img = palette[label]

    # per-image lighting and per-class brightness jitter keep the task
    # non-trivial inside a single domain
    lighting = rng.uniform(0.92, 1.08)
    class_gain = rng.uniform(0.95, 1.05, size=palette.shape[0])
    img = img * (lighting * class_gain[label])[..., None]

    yy, xx = np.mgrid[0:s, 0:s]
    phase_x, phase_y = rng.uniform(0.0, 2.0 * math.pi, size=2)
    tex = 1.0 + style.texture_amplitude * np.sin(
        2.0 * math.pi * style.texture_freq * xx / s + phase_x
    ) * np.sin(2.0 * math.pi * style.texture_freq * yy / s + phase_y)
    img = img * tex[..., None]

    if style.hue_rotation != 0.0:
        img = img @ _hue_matrix(style.hue_rotation).T
    img = np.clip(img, 0.0, 1.0)
    if style.gamma != 1.0:
        img = img**style.gamma
    if style.noise_amplitude > 0.0:
        img = img + rng.normal(0.0, style.noise_amplitude, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(
    scene: SceneSpec, style: DomainStyle, n: int, seed: int, split: str = SPLIT_SOURCE
) -> list[DatasetItem]:
    """Deterministic per (scene, style, n, seed, split); item i derives its own stream."""
    if n < 1:
        raise ConfigError(f"generate: n must be >= 1, got {n}")
    if split not in SPLITS:
        raise ConfigError(f"generate: unknown split {split!r}, expected one of {SPLITS}")
    scene.validate()
    style.validate()
    items = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, _split_tag(split), i)))
        label = _draw_layout(scene, rng)
        image = _render(label, style, rng)
        keep_label = None if split == SPLIT_TARGET_TRAIN else label
        items.append(DatasetItem(f"{split}-{i:06d}", split, image, keep_label))
    return items


def _split_tag(split: str) -> int:
    return SPLITS.index(split)


# ---------------------------------------------------------------------------
# augmentation (color jitter + gaussian blur)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    jitter: float = 0.25
    blur_sigma_max: float = 1.0


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with edge-replicate padding; sigma 0 is the identity."""
    if sigma <= 0.0:
        return image
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.asarray(image, dtype=np.float64)
    padded = np.pad(out, ((r, r), (0, 0), (0, 0)), mode="edge")
    out = sum(k[i] * padded[i : i + image.shape[0]] for i in range(len(k)))
    padded = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="edge")
    out = sum(k[i] * padded[:, i : i + image.shape[1]] for i in range(len(k)))
    return out


def augment(image: np.ndarray, seed, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Color jitter plus gaussian blur; returns float64 clamped to [0,1].

    With jitter 0 and blur_sigma_max 0 this is the identity.
    """
    out = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    j = cfg.jitter
    if j > 0.0:
        brightness = rng.uniform(1.0 - j, 1.0 + j)
        contrast = rng.uniform(1.0 - j, 1.0 + j)
        gains = rng.uniform(1.0 - 0.5 * j, 1.0 + 0.5 * j, size=3)
        mean = out.mean()
        out = (out - mean) * contrast + mean
        out = out * brightness * gains
    if cfg.blur_sigma_max > 0.0:
        out = gaussian_blur(out, rng.uniform(0.0, cfg.blur_sigma_max))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset directory I/O
# ---------------------------------------------------------------------------

IMAGE_MAGIC = b"DSPIMG1"
LABEL_MAGIC = b"DSPLBL1"
MANIFEST_NAME = "manifest.json"


def write_image_file(path, image: np.ndarray) -> None:
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[: len(IMAGE_MAGIC)] != IMAGE_MAGIC:
        raise DataError(f"image file {path}: unknown magic {blob[:7]!r}")
    header_end = len(IMAGE_MAGIC) + 12
    if len(blob) < header_end:
        raise DataError(f"image file {path}: truncated header")
    h, w, c = struct.unpack("<III", blob[len(IMAGE_MAGIC) : header_end])
    expected = header_end + 4 * h * w * c
    if len(blob) != expected:
        raise DataError(f"image file {path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob[header_end:], dtype="<f4").reshape(h, w, c).copy()


def write_label_file(path, label: np.ndarray) -> None:
    h, w = label.shape
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(label, dtype=np.uint8).tobytes())


def read_label_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[: len(LABEL_MAGIC)] != LABEL_MAGIC:
        raise DataError(f"label file {path}: unknown magic {blob[:7]!r}")
    header_end = len(LABEL_MAGIC) + 8
    if len(blob) < header_end:
        raise DataError(f"label file {path}: truncated header")
    h, w = struct.unpack("<II", blob[len(LABEL_MAGIC) : header_end])
    expected = header_end + h * w
    if len(blob) != expected:
        raise DataError(f"label file {path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob[header_end:], dtype=np.uint8).reshape(h, w).copy()


def write_dataset(items: list[DatasetItem], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"version": 1, "class_count": CLASS_COUNT, "items": []}
    for item in items:
        entry = {"id": item.item_id, "split": item.split, "image": f"{item.item_id}.img"}
        write_image_file(directory / entry["image"], item.image)
        if item.label is not None:
            entry["label"] = f"{item.item_id}.lbl"
            write_label_file(directory / entry["label"], item.label)
        manifest["items"].append(entry)
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )


def read_dataset(directory) -> list[DatasetItem]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"dataset {directory}: missing {MANIFEST_NAME}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"dataset {directory}: malformed manifest: {exc}") from exc
    if manifest.get("version") != 1:
        raise DataError(f"dataset {directory}: unsupported manifest version {manifest.get('version')}")
    if manifest.get("class_count") != CLASS_COUNT:
        raise DataError(
            f"dataset {directory}: class_count {manifest.get('class_count')} != {CLASS_COUNT}"
        )
    items = []
    for entry in manifest["items"]:
        item_id, split = entry["id"], entry["split"]
        if split not in SPLITS:
            raise DataError(f"dataset {directory}: item {item_id} has unknown split {split!r}")
        image_path = directory / entry["image"]
        if not image_path.is_file():
            raise DataError(f"dataset {directory}: missing image file for item {item_id}")
        image = read_image_file(image_path)
        label = None
        if "label" in entry:
            label_path = directory / entry["label"]
            if not label_path.is_file():
                raise DataError(f"dataset {directory}: missing label file for item {item_id}")
            label = read_label_file(label_path)
        items.append(DatasetItem(item_id, split, image, label))
    return items


def split_items(items: list[DatasetItem], split: str) -> list[DatasetItem]:
    return [it for it in items if it.split == split]


def default_datasets(
    seed: int = 0, n_source: int = 400, n_target: int = 400, n_eval: int = 120
) -> tuple[list[DatasetItem], list[DatasetItem], list[DatasetItem]]:
    """The built-in paired toy benchmark: (source, target_train, target_eval)."""
    scene = SceneSpec()
    return (
        generate(scene, SOURCE_STYLE, n_source, seed, SPLIT_SOURCE),
        generate(scene, TARGET_STYLE, n_target, seed, SPLIT_TARGET_TRAIN),
        generate(scene, TARGET_STYLE, n_eval, seed, SPLIT_TARGET_EVAL),
    )
