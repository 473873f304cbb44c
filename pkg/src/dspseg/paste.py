"""Dual soft-paste composition.

A paste mask selects half of the template's classes plus every sampled
tail-class pixel of the tail items; tail content is copied into the template
first (later items overwrite earlier ones, and tail pixels beat template
pixels).  The composite is then alpha-blended at opacity beta onto a source
image and onto a target image, producing the two mixed student inputs and
their weighted label structures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .sampling import IterationSample


@dataclass(frozen=True)
class PasteMask:
    m: np.ndarray  # (H,W) float64 with values in {0, beta}
    beta: float


@dataclass(frozen=True)
class CompositeTemplate:
    image: np.ndarray  # (H,W,3) float64, tail pixels copied in
    label: np.ndarray  # (H,W) uint8


@dataclass(frozen=True)
class SoftLabels:
    """Per-pixel weighted label pair: (paste_label, weight) and (base_label, 1-weight)."""

    paste_label: np.ndarray
    base_label: np.ndarray
    weight: np.ndarray  # (H,W) float64, the paste-side weight


@dataclass(frozen=True)
class MixedPair:
    x_ps: np.ndarray
    x_pt: np.ndarray
    y_mix_source: SoftLabels
    y_mix_target: SoftLabels


def build_mask(sample: IterationSample, beta: float) -> tuple[PasteMask, CompositeTemplate]:
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"build_mask: beta must be in [0,1], got {beta}")
    shape = sample.template_label.shape
    for i, y in enumerate(sample.tail_labels):
        if y.shape != shape:
            raise ShapeError(f"build_mask: tail item {i} label shape {y.shape} != template {shape}")
    for i, img in enumerate(sample.tail_images):
        if img.shape[:2] != shape:
            raise ShapeError(f"build_mask: tail item {i} image shape {img.shape} != template {shape}")

    support = np.isin(sample.template_label, np.asarray(sample.chosen_classes, dtype=np.uint8))
    image = np.asarray(sample.template_image, dtype=np.float64).copy()
    label = sample.template_label.copy()
    tail_set = np.asarray(sample.tail_classes, dtype=np.uint8)
    for tail_image, tail_label in zip(sample.tail_images, sample.tail_labels):
        tmask = np.isin(tail_label, tail_set)
        image[tmask] = np.asarray(tail_image, dtype=np.float64)[tmask]
        label[tmask] = tail_label[tmask]
        support |= tmask

    m = np.where(support, float(beta), 0.0)
    return PasteMask(m=m, beta=float(beta)), CompositeTemplate(image=image, label=label)


def mix(
    x_s: np.ndarray,
    x_t: np.ndarray,
    mask: PasteMask,
    template: CompositeTemplate,
    y_s: np.ndarray,
    y_t: np.ndarray,
) -> MixedPair:
    """Blend the composite onto both streams: x = m*template + (1-m)*base.

    y_t is the target pseudo-label map.  Endpoints are exact: wherever m is 0
    the base image passes through unchanged, and at beta=1 mask-support
    pixels equal the composite exactly.
    """
    shape = mask.m.shape
    for name, arr, want in (
        ("x_s", x_s, shape + (3,)),
        ("x_t", x_t, shape + (3,)),
        ("template image", template.image, shape + (3,)),
        ("y_s", y_s, shape),
        ("y_t", y_t, shape),
        ("template label", template.label, shape),
    ):
        if arr.shape != want:
            raise ShapeError(f"mix: {name} shape {arr.shape}, expected {want}")

    m3 = mask.m[..., None]
    x_ps = np.clip(m3 * template.image + (1.0 - m3) * np.asarray(x_s, dtype=np.float64), 0.0, 1.0)
    x_pt = np.clip(m3 * template.image + (1.0 - m3) * np.asarray(x_t, dtype=np.float64), 0.0, 1.0)
    return MixedPair(
        x_ps=x_ps,
        x_pt=x_pt,
        y_mix_source=SoftLabels(paste_label=template.label, base_label=y_s, weight=mask.m),
        y_mix_target=SoftLabels(paste_label=template.label, base_label=y_t, weight=mask.m),
    )
