"""Shared test oracles: finite differences, nested-loop convolution, tiny data."""

from __future__ import annotations

import numpy as np
import pytest

from dspseg import domains
from dspseg.tensor import Tensor, backward

FD_STEP = 1e-5
FD_TOL = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def fd_gradients(build, param: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of the scalar build() w.r.t. one parameter."""
    numeric = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = numeric.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = float(build().data)
        flat[i] = saved - h
        minus = float(build().data)
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * h)
    return numeric


def check_gradients(build, params, tol: float = FD_TOL) -> float:
    """Backprop through build() and compare every parameter against FD."""
    loss = build()
    backward(loss, params=params)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = fd_gradients(build, p)
        worst = max(worst, relative_error(analytic, numeric))
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e} >= {tol}"
    return worst


def conv2d_oracle(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, pad: int):
    """Nested-loop cross-correlation, the independent reference for conv2d."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    xp[ni, ci, oi * stride + ki, oj * stride + kj]
                                    * w[fi, ci, ki, kj]
                                )
                    out[ni, fi, oi, oj] = acc + (0.0 if b is None else b[fi])
    return out


def upsample_oracle(x: np.ndarray, factor: int) -> np.ndarray:
    """Per-pixel bilinear interpolation with half-pixel centers, edges clamped."""
    n, c, h, w = x.shape
    oh, ow = h * factor, w * factor
    out = np.zeros((n, c, oh, ow))
    for oi in range(oh):
        si = np.clip((oi + 0.5) / factor - 0.5, 0.0, h - 1)
        i0, ti = int(np.floor(si)), si - np.floor(si)
        i1 = min(i0 + 1, h - 1)
        for oj in range(ow):
            sj = np.clip((oj + 0.5) / factor - 0.5, 0.0, w - 1)
            j0, tj = int(np.floor(sj)), sj - np.floor(sj)
            j1 = min(j0 + 1, w - 1)
            out[:, :, oi, oj] = (
                (1 - ti) * (1 - tj) * x[:, :, i0, j0]
                + (1 - ti) * tj * x[:, :, i0, j1]
                + ti * (1 - tj) * x[:, :, i1, j0]
                + ti * tj * x[:, :, i1, j1]
            )
    return out


@pytest.fixture(scope="session")
def tiny_data():
    """Small paired splits shared by trainer/metrics/cli tests."""
    return domains.default_datasets(seed=0, n_source=40, n_target=40, n_eval=10)
