"""Dense float64 tensors with reverse-mode autodiff.

The op set is deliberately fixed: exactly what the segmentation network and
the training losses need, each with a hand-written vectorized backward.
Everything runs on numpy arrays in float64; forward results are bit-identical
across runs because every reduction has a fixed order (BLAS matmul, bincount,
ordered tape walk).

Gradients are recorded on an implicit tape: each op node keeps references to
its parents and a closure that maps the node's output gradient to parent
gradients.  ``backward(loss)`` topologically sorts the recorded graph and
walks it once in reverse.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher/eval forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def relu(self) -> "Tensor":
        return relu(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting in the forward."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, params=()) -> None:
    """Reverse-mode pass from a scalar loss.

    Populates `.grad` on every reachable requires_grad tensor; any tensor in
    `params` that the loss does not depend on gets an explicit zero gradient.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g):
        _accumulate(x, g * (x.data > 0.0))

    return _record(out, (x,), bwd)


def add(x: Tensor, y: Tensor) -> Tensor:
    try:
        data = x.data + y.data
    except ValueError:
        raise ShapeError(f"add: shapes {x.data.shape} and {y.data.shape} do not broadcast")
    out = Tensor(data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g, x.data.shape))
        if y.requires_grad:
            _accumulate(y, _unbroadcast(g, y.data.shape))

    return _record(out, (x, y), bwd)


def mul_scalar(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s)

    def bwd(g):
        _accumulate(x, g * s)

    return _record(out, (x,), bwd)


def elementwise_mul(x: Tensor, y: Tensor) -> Tensor:
    try:
        data = x.data * y.data
    except ValueError:
        raise ShapeError(
            f"elementwise_mul: shapes {x.data.shape} and {y.data.shape} do not broadcast"
        )
    out = Tensor(data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g * y.data, x.data.shape))
        if y.requires_grad:
            _accumulate(y, _unbroadcast(g * x.data, y.data.shape))

    return _record(out, (x, y), bwd)


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bwd(g):
        _accumulate(x, np.full_like(x.data, float(g)))

    return _record(out, (x,), bwd)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())

    def bwd(g):
        _accumulate(x, np.full_like(x.data, float(g) / n))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, hp, wp = x.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, oh, ow, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
    )
    cols = np.ascontiguousarray(view).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow, (n, c, hp, wp)


def _col2im(dcols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, oh: int, ow: int):
    """Scatter column gradients back to the padded input, one kernel tap at a time."""
    n, c, hp, wp = padded_shape
    dx = np.zeros(padded_shape, dtype=np.float64)
    blk = dcols.reshape(n, oh, ow, c, kh, kw)
    for di in range(kh):
        for dj in range(kw):
            tap = blk[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            dx[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += tap
    return dx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), x (N,C,H,W), w (F,C,kh,kw), b (F,)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-d input and kernel, got {x.data.shape} and {w.data.shape}"
        )
    n, c, h, wid = x.data.shape
    f, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(
            f"conv2d: input channels {c} != kernel channels {cw} "
            f"(input {x.data.shape}, kernel {w.data.shape})"
        )
    if h + 2 * pad < kh or wid + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {w.data.shape} larger than padded input {x.data.shape}")
    if b is not None and b.data.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({f},)")

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * wid, c)
        oh, ow, padded_shape = h, wid, (n, c, h, wid)
    else:
        cols, oh, ow, padded_shape = _im2col(x.data, kh, kw, stride, pad)
    w_mat = w.data.reshape(f, c * kh * kw)
    out_mat = cols @ w_mat.T
    if b is not None:
        out_mat = out_mat + b.data
    out = Tensor(out_mat.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))

    def bwd(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
        if w.requires_grad:
            _accumulate(w, (g_mat.T @ cols).reshape(f, c, kh, kw))
        if b is not None and b.requires_grad:
            _accumulate(b, g_mat.sum(axis=0))
        if x.requires_grad:
            dcols = g_mat @ w_mat
            if kh == 1 and kw == 1 and stride == 1 and pad == 0:
                dx = dcols.reshape(n, h, wid, c).transpose(0, 3, 1, 2)
            else:
                dx = _col2im(dcols, padded_shape, kh, kw, stride, oh, ow)
                if pad:
                    dx = dx[:, :, pad:-pad, pad:-pad]
            _accumulate(x, dx)

    return _record(out, (x, w) if b is None else (x, w, b), bwd)


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {(h, w)} not divisible by window {k}")
    out = Tensor(x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5)))

    def bwd(g):
        _accumulate(x, np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k))

    return _record(out, (x,), bwd)


_UPSAMPLE_CACHE: dict[tuple, np.ndarray] = {}


def _upsample_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-stochastic (n_in*factor, n_in) interpolation matrix, half-pixel centers."""
    key = (n_in, factor)
    cached = _UPSAMPLE_CACHE.get(key)
    if cached is not None:
        return cached
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    mat[np.arange(n_out), lo] += 1.0 - frac
    mat[np.arange(n_out), hi] += frac
    _UPSAMPLE_CACHE[key] = mat
    return mat


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample: expected 4-d input, got {x.data.shape}")
    h, w = x.data.shape[2:]
    ky = _upsample_matrix(h, factor)
    kx = _upsample_matrix(w, factor)
    out = Tensor(ky @ x.data @ kx.T)

    def bwd(g):
        _accumulate(x, ky.T @ g @ kx)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# classification head ops
# ---------------------------------------------------------------------------


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)

    def bwd(g):
        _accumulate(x, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), bwd)


IGNORE_LABEL = 255


def gather_nll(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Per-pixel negative log-likelihood of integer labels.

    log_probs (N,C,H,W), labels (N,H,W) of class ids; positions labeled
    IGNORE_LABEL yield 0 and receive no gradient.
    """
    if log_probs.data.ndim != 4 or labels.ndim != 3:
        raise ShapeError(
            f"gather_nll: expected (N,C,H,W) log_probs and (N,H,W) labels, "
            f"got {log_probs.data.shape} and {labels.shape}"
        )
    n, c, h, w = log_probs.data.shape
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"gather_nll: labels shape {labels.shape} != {(n, h, w)} from log_probs"
        )
    valid = labels != IGNORE_LABEL
    if np.any((labels >= c) & valid) or np.any(labels < 0):
        raise ShapeError(f"gather_nll: label out of range for {c} classes")
    safe = np.where(valid, labels, 0)
    ni, hi, wi = np.indices((n, h, w))
    nll = np.where(valid, -log_probs.data[ni, safe, hi, wi], 0.0)
    out = Tensor(nll)

    def bwd(g):
        dlp = np.zeros_like(log_probs.data)
        dlp[ni[valid], safe[valid], hi[valid], wi[valid]] = -g[valid]
        _accumulate(log_probs, dlp)

    return _record(out, (log_probs,), bwd)


# ---------------------------------------------------------------------------
# structural ops used by the feature-alignment losses
# ---------------------------------------------------------------------------


def select_item(x: Tensor, i: int) -> Tensor:
    """Pick batch item i from (N,...) -> (...)."""
    out = Tensor(x.data[i])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[i] = g
        _accumulate(x, dx)

    return _record(out, (x,), bwd)


def spatial_rows(x: Tensor) -> Tensor:
    """Flatten a (C,h,w) feature map to (h*w, C) location vectors."""
    if x.data.ndim != 3:
        raise ShapeError(f"spatial_rows: expected (C,h,w), got {x.data.shape}")
    c, h, w = x.data.shape
    out = Tensor(np.ascontiguousarray(x.data.transpose(1, 2, 0)).reshape(h * w, c))

    def bwd(g):
        _accumulate(x, g.reshape(h, w, c).transpose(2, 0, 1))

    return _record(out, (x,), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-d input, got {x.data.shape}")
    out = Tensor(x.data[idx])

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        _accumulate(x, dx)

    return _record(out, (x,), bwd)


def rbf_mmd2(a: Tensor, b: Tensor, bandwidth: float) -> Tensor:
    """Biased squared-MMD V-statistic under a Gaussian RBF kernel.

    mean(Kaa) + mean(Kbb) - 2 mean(Kab) with k(x,y)=exp(-|x-y|^2/(2*bw^2)).
    The bandwidth is treated as a constant (no gradient flows through it).
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"rbf_mmd2: sample shapes {a.data.shape} and {b.data.shape} mismatch")
    if a.data.shape[0] == 0 or b.data.shape[0] == 0:
        raise ShapeError("rbf_mmd2: empty sample set")
    if not bandwidth > 0:
        raise ShapeError(f"rbf_mmd2: bandwidth must be positive, got {bandwidth}")
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    m, n = a.data.shape[0], b.data.shape[0]

    def kernel(u, v):
        uu = (u * u).sum(axis=1)[:, None]
        vv = (v * v).sum(axis=1)[None, :]
        d2 = np.maximum(uu + vv - 2.0 * (u @ v.T), 0.0)
        return np.exp(-d2 * inv)

    kaa = kernel(a.data, a.data)
    kbb = kernel(b.data, b.data)
    kab = kernel(a.data, b.data)
    # cross mean averaged over both traversal orders so the estimate is
    # bitwise symmetric in (a, b) despite pairwise-summation order
    cross = 0.5 * (kab.sum() + np.ascontiguousarray(kab.T).sum()) / (m * n)
    out = Tensor(kaa.mean() + kbb.mean() - 2.0 * cross)

    def bwd(g):
        # d/dx exp(-|x-y|^2/(2bw^2)) = k(x,y) (y-x)/bw^2
        s = float(g) / (bandwidth * bandwidth)
        if a.requires_grad:
            da = (2.0 / (m * m)) * (kaa @ a.data - kaa.sum(axis=1)[:, None] * a.data)
            da -= (2.0 / (m * n)) * (kab @ b.data - kab.sum(axis=1)[:, None] * a.data)
            _accumulate(a, s * da)
        if b.requires_grad:
            db = (2.0 / (n * n)) * (kbb @ b.data - kbb.sum(axis=1)[:, None] * b.data)
            db -= (2.0 / (m * n)) * (kab.T @ a.data - kab.sum(axis=0)[:, None] * b.data)
            _accumulate(b, s * db)

    return _record(out, (a, b), bwd)
