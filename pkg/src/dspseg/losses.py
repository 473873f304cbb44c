"""Training losses: segmentation CE, the two soft paste losses, and MMD alignment.

Cross-entropy terms are means over non-ignored pixels.  The paste losses
weight two label maps per pixel, the composite label at the mask value m and
the base label at 1-m, each side normalized by its own valid-pixel count so
the m=0 and m=1 endpoints reproduce the plain segmentation loss exactly.
Feature alignment compares per-location feature vectors between the two
mixed streams with a squared MMD under a Gaussian kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .domains import IGNORE_LABEL
from .errors import ShapeError
from .paste import PasteMask
from .tensor import (
    Tensor,
    add,
    elementwise_mul,
    gather_nll,
    mul_scalar,
    rbf_mmd2,
    spatial_rows,
    take_rows,
    tensor_sum,
)

log = logging.getLogger(__name__)
_warned: set[str] = set()

LOSS_CSV_COLUMNS = ("iteration", "seg", "seg_soft", "cons", "paste_mmd", "global_mmd", "total", "lr")


def _warn_once(message: str) -> None:
    # degenerate-case warnings can fire every step (e.g. beta=0); log once
    if message not in _warned:
        _warned.add(message)
        log.warning(message)


@dataclass(frozen=True)
class MmdConfig:
    bandwidth: float | None = None  # None selects the median heuristic per call
    fallback_bandwidth: float = 1.0  # used when all pooled samples coincide


@dataclass(frozen=True)
class LossBreakdown:
    seg: float
    seg_soft: float
    cons: float
    paste_mmd: float
    global_mmd: float
    total: float
    lambda_feature: float

    def row(self, iteration: int, lr: float) -> list[str]:
        return [
            str(iteration),
            repr(self.seg),
            repr(self.seg_soft),
            repr(self.cons),
            repr(self.paste_mmd),
            repr(self.global_mmd),
            repr(self.total),
            repr(lr),
        ]


def _weighted_ce(log_probs: Tensor, labels: np.ndarray, weight: np.ndarray | float) -> Tensor:
    """Sum of weight * CE over valid pixels, divided by the valid-pixel count."""
    valid = labels != IGNORE_LABEL
    count = int(valid.sum())
    if count == 0:
        _warn_once("cross-entropy over a fully ignored label map, contributing 0")
        return Tensor(0.0)
    nll = gather_nll(log_probs, labels)  # zero at ignored pixels
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), labels.shape)
    term = elementwise_mul(nll, Tensor(np.where(valid, w, 0.0)))
    return mul_scalar(tensor_sum(term), 1.0 / count)


def seg_loss(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over non-ignored pixels."""
    if log_probs.data.shape[0] != labels.shape[0] or log_probs.data.shape[2:] != labels.shape[1:]:
        raise ShapeError(
            f"seg_loss: log_probs {log_probs.data.shape} incompatible with labels {labels.shape}"
        )
    return _weighted_ce(log_probs, labels, 1.0)


def _pair_loss(
    log_probs: Tensor, paste_labels: np.ndarray, base_labels: np.ndarray, mask: PasteMask
) -> Tensor:
    if paste_labels.shape != base_labels.shape:
        raise ShapeError(
            f"paste loss: label shapes {paste_labels.shape} and {base_labels.shape} differ"
        )
    if mask.m.shape != paste_labels.shape[-2:]:
        raise ShapeError(f"paste loss: mask {mask.m.shape} vs labels {paste_labels.shape}")
    m = np.broadcast_to(mask.m, paste_labels.shape)
    return add(
        _weighted_ce(log_probs, paste_labels, m),
        _weighted_ce(log_probs, base_labels, 1.0 - m),
    )


def seg_soft_loss(
    log_probs: Tensor, paste_labels: np.ndarray, source_labels: np.ndarray, mask: PasteMask
) -> Tensor:
    """Mixed-source loss: composite label weighted by m, source label by 1-m."""
    return _pair_loss(log_probs, paste_labels, source_labels, mask)


def consistency_loss(
    log_probs: Tensor, paste_labels: np.ndarray, pseudo_labels: np.ndarray, mask: PasteMask
) -> Tensor:
    """Mixed-target loss: composite label weighted by m, pseudo-label by 1-m."""
    return _pair_loss(log_probs, paste_labels, pseudo_labels, mask)


_TRIU_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def median_bandwidth(points: np.ndarray, fallback: float) -> float:
    """Median pairwise distance over the pooled sample set; fallback if degenerate."""
    n = points.shape[0]
    if n < 2:
        return fallback
    sq = (points * points).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * points @ points.T, 0.0)
    if n not in _TRIU_CACHE:
        _TRIU_CACHE[n] = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(d2[_TRIU_CACHE[n]])))
    return med if med > 0.0 else fallback


def mmd2(a: Tensor, b: Tensor, cfg: MmdConfig = MmdConfig()) -> Tensor:
    """Biased squared MMD, clamped at zero against fp negatives."""
    if a.data.shape[0] == 0 or b.data.shape[0] == 0:
        _warn_once("mmd2 over an empty sample set, contributing 0")
        return Tensor(0.0)
    if cfg.bandwidth is not None:
        bw = cfg.bandwidth
    else:
        bw = median_bandwidth(np.concatenate([a.data, b.data], axis=0), cfg.fallback_bandwidth)
    raw = rbf_mmd2(a, b, bw)
    if raw.data >= 0.0:
        return raw
    return mul_scalar(raw, 0.0)


def pool_mask(m: np.ndarray, factor: int) -> np.ndarray:
    h, w = m.shape
    if h % factor or w % factor:
        raise ShapeError(f"pool_mask: mask {m.shape} not divisible by factor {factor}")
    return m.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def feature_alignment(
    f_ps: Tensor, f_pt: Tensor, mask: PasteMask, cfg: MmdConfig = MmdConfig()
) -> tuple[Tensor, Tensor]:
    """Paste-patch and global MMD between the two mixed-stream feature maps.

    Both feature maps are (F, h, w) for one item.  The paste term scales each
    location's feature vector by the mask average-pooled to (h, w) and keeps
    only locations where that pooled value is positive; the global term uses
    every location unscaled.
    """
    if f_ps.data.shape != f_pt.data.shape:
        raise ShapeError(f"feature_alignment: {f_ps.data.shape} vs {f_pt.data.shape}")
    if f_ps.data.ndim != 3:
        raise ShapeError(f"feature_alignment: expected (F,h,w) maps, got {f_ps.data.shape}")
    _, h, w = f_ps.data.shape
    if mask.m.shape[0] % h or mask.m.shape[1] % w or mask.m.shape[0] // h != mask.m.shape[1] // w:
        raise ShapeError(
            f"feature_alignment: mask {mask.m.shape} not an integer multiple of features {(h, w)}"
        )
    factor = mask.m.shape[0] // h

    rows_ps = spatial_rows(f_ps)  # (h*w, F)
    rows_pt = spatial_rows(f_pt)
    global_term = mmd2(rows_ps, rows_pt, cfg)

    pooled = pool_mask(mask.m, factor).reshape(-1)
    sel = np.flatnonzero(pooled > 0.0)
    if sel.size == 0:
        _warn_once("paste mask support vanished at feature resolution, paste term is 0")
        return Tensor(0.0), global_term
    scale = Tensor(pooled[sel][:, None])
    a = elementwise_mul(take_rows(rows_ps, sel), scale)
    b = elementwise_mul(take_rows(rows_pt, sel), scale)
    return mmd2(a, b, cfg), global_term
