"""Compact segmentation network: 4-block conv encoder + 1x1 classifier head.

The encoder output (stride-4 feature map) is the representation the
feature-alignment losses compare; the head upsamples back to input
resolution and emits per-pixel log-probabilities.  A training run holds two
parameter sets of identical layout: the student (gradient-updated) and the
teacher (EMA of the student, never receives gradients).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import Tensor

DOWNSAMPLE = 4

# (name, stride); all encoder convs are 3x3 with pad 1
_ENCODER_BLOCKS = (("enc1", 1), ("enc2", 2), ("enc3", 2), ("enc4", 1))


@dataclass(frozen=True)
class SegNet:
    class_count: int = 8
    feature_width: int = 32
    in_channels: int = 3


ParamSet = dict[str, Tensor]


def init_params(net: SegNet, rng: np.random.Generator, requires_grad: bool = True) -> ParamSet:
    """He-initialized weights, zero biases; iteration order is fixed by name."""
    params: ParamSet = {}
    c_in = net.in_channels
    for name, _stride in _ENCODER_BLOCKS:
        fan_in = c_in * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(net.feature_width, c_in, 3, 3))
        params[f"{name}.w"] = Tensor(w, requires_grad=requires_grad)
        params[f"{name}.b"] = Tensor(np.zeros(net.feature_width), requires_grad=requires_grad)
        c_in = net.feature_width
    w = rng.normal(0.0, np.sqrt(2.0 / net.feature_width), size=(net.class_count, net.feature_width, 1, 1))
    params["head.w"] = Tensor(w, requires_grad=requires_grad)
    params["head.b"] = Tensor(np.zeros(net.class_count), requires_grad=requires_grad)
    return params


def clone_params(params: ParamSet, requires_grad: bool = False) -> ParamSet:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


def forward_batch(net: SegNet, params: ParamSet, x: Tensor) -> tuple[Tensor, Tensor]:
    """Run a (N,3,H,W) batch; returns (features (N,F,H/4,W/4), log_probs (N,C,H,W))."""
    n, c, h, w = x.data.shape
    if c != net.in_channels:
        raise ShapeError(f"forward: expected {net.in_channels} input channels, got {c}")
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(f"forward: spatial dims {(h, w)} must be divisible by {DOWNSAMPLE}")
    hmap = x
    for name, stride in _ENCODER_BLOCKS:
        hmap = T.relu(T.conv2d(hmap, params[f"{name}.w"], params[f"{name}.b"], stride=stride, pad=1))
    logits = T.conv2d(hmap, params["head.w"], params["head.b"])
    log_probs = T.log_softmax(T.bilinear_upsample(logits, DOWNSAMPLE), axis=1)
    return hmap, log_probs


def predict(net: SegNet, params: ParamSet, image: np.ndarray) -> tuple[Tensor, Tensor]:
    """Single (H,W,3) image -> (features (F,H/4,W/4), log_probs (C,H,W)), no tape."""
    if image.ndim != 3 or image.shape[2] != net.in_channels:
        raise ShapeError(f"predict: expected (H,W,{net.in_channels}) image, got {image.shape}")
    x = Tensor(image.astype(np.float64).transpose(2, 0, 1)[None])
    with T.no_grad():
        feats, log_probs = forward_batch(net, params, x)
    return Tensor(feats.data[0]), Tensor(log_probs.data[0])


def ema_update(teacher: ParamSet, student: ParamSet, alpha: float) -> None:
    """teacher = alpha * teacher + (1 - alpha) * student, elementwise in place."""
    if teacher.keys() != student.keys():
        raise ShapeError(
            f"ema_update: parameter names differ: {sorted(teacher.keys() ^ student.keys())}"
        )
    for name, t in teacher.items():
        s = student[name]
        if t.data.shape != s.data.shape:
            raise ShapeError(f"ema_update: shape mismatch for {name}: {t.data.shape} vs {s.data.shape}")
        t.data[...] = alpha * t.data + (1.0 - alpha) * s.data


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DSPCKPT1"


def save_checkpoint(path, class_count: int, feature_width: int, entries: dict[str, np.ndarray]) -> None:
    """Named float64 arrays after an 8-byte magic and a (classes, width) header."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", class_count, feature_width))
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[int, int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint {path}: unknown magic {blob[:8]!r}")
    off = len(CHECKPOINT_MAGIC)

    def take(count, what):
        nonlocal off
        if off + count > len(blob):
            raise DataError(f"checkpoint {path}: truncated while reading {what}")
        piece = blob[off : off + count]
        off += count
        return piece

    class_count, feature_width = struct.unpack("<II", take(8, "header"))
    entries: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "shape rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * size, f"data of {name}"), dtype="<f8")
        entries[name] = data.reshape(shape).astype(np.float64)
    return class_count, feature_width, entries
