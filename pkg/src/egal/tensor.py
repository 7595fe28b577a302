"""Dense float64 tensors, CNN layer primitives, and reverse-mode autodiff.

Every operation takes an optional ComputationTape as its first argument.
With a tape, the op records a backward closure; ``backward(tape, out)``
replays the recorded closures in exact reverse order, accumulating
gradients into the ``grad`` buffer of every tensor reached. With
``tape=None`` the op is a plain forward evaluation.

All buffers are 64-bit floats. Convolution uses an unrolled-matrix
(im2col) path feeding a single GEMM; there is no FFT path.
"""

from __future__ import annotations

import os
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


# Opt-in per-op finiteness checks; cheap insurance for tests, off in hot runs.
CHECK_FINITE = os.environ.get("EGAL_CHECK_FINITE", "") == "1"


class Tensor:
    """A dense n-d float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        if not self.data.flags["C_CONTIGUOUS"]:  # 0-d arrays stay 0-d
            self.data = np.ascontiguousarray(self.data)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class Tape:
    """Ordered record of primitive operations for reverse-mode replay."""

    __slots__ = ("_records", "_watched", "_known")

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._watched: list[Tensor] = []
        self._known: set[int] = set()

    def watch(self, *tensors: Tensor) -> None:
        """Declare leaf tensors whose gradients the caller wants populated."""
        for t in tensors:
            self._watched.append(t)
            self._known.add(id(t))

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))
        self._known.add(id(out))

    def __len__(self) -> int:
        return len(self._records)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # own the buffer; g may alias
    else:
        t.grad += g


def backward(tape: Tape, output: Tensor) -> None:
    """Propagate d(output)/d(leaf) into grad buffers of all reached tensors.

    ``output`` must be scalar and must have been produced on (or watched
    by) ``tape``. Watched leaves not reached by the replay end up with a
    zero gradient buffer rather than ``None``.
    """
    if output.size != 1:
        raise ContractError(f"backward target must be scalar, got shape {output.shape}")
    if id(output) not in tape._known:
        raise ContractError("backward target was not produced on this tape")
    _accum(output, np.ones_like(output.data))
    for out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)
    for leaf in tape._watched:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _finish(tape: Optional[Tape], out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise ContractError("operation produced non-finite values")
    if tape is not None:
        tape.record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(tape: Optional[Tape], a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(dy):
        _accum(a, dy)
        _accum(b, dy)

    return _finish(tape, out, bwd)


def mul(tape: Optional[Tape], a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(dy):
        _accum(a, dy * b.data)
        _accum(b, dy * a.data)

    return _finish(tape, out, bwd)


def scale(tape: Optional[Tape], a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def bwd(dy):
        _accum(a, dy * c)

    return _finish(tape, out, bwd)


def add_const(tape: Optional[Tape], a: Tensor, c) -> Tensor:
    out = Tensor(a.data + c)

    def bwd(dy):
        _accum(a, dy)

    return _finish(tape, out, bwd)


def mul_const(tape: Optional[Tape], a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or ndarray (no gradient through c)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != a.shape:
        raise DimensionError(f"mul_const: shapes {a.shape} vs {c.shape}")
    out = Tensor(a.data * c)

    def bwd(dy):
        _accum(a, dy * c)

    return _finish(tape, out, bwd)


def relu(tape: Optional[Tape], x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(dy):
        _accum(x, dy * (x.data > 0.0))  # subgradient at exactly 0 is 0

    return _finish(tape, out, bwd)


def sum_all(tape: Optional[Tape], x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bwd(dy):
        _accum(x, np.full_like(x.data, float(dy)))

    return _finish(tape, out, bwd)


def mean_batch(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Mean over a 1-d tensor; scalar inputs pass through."""
    n = x.size
    if n == 0:
        raise DimensionError("mean_batch: empty input")
    out = Tensor(x.data.mean())

    def bwd(dy):
        _accum(x, np.full_like(x.data, float(dy) / n))

    return _finish(tape, out, bwd)


def sum_spatial(tape: Optional[Tape], x: Tensor) -> Tensor:
    """(B,H,W) -> (B,) sum over the spatial axes."""
    if x.ndim != 3:
        raise DimensionError(f"sum_spatial expects (B,H,W), got {x.shape}")
    out = Tensor(x.data.sum(axis=(1, 2)))

    def bwd(dy):
        _accum(x, np.broadcast_to(dy[:, None, None], x.shape).copy())

    return _finish(tape, out, bwd)


def spatial_max(tape: Optional[Tape], x: Tensor) -> Tensor:
    """(B,H,W) -> (B,) max per sample; gradient goes to the first argmax."""
    if x.ndim != 3:
        raise DimensionError(f"spatial_max expects (B,H,W), got {x.shape}")
    b, h, w = x.shape
    flat = x.data.reshape(b, h * w)
    idx = flat.argmax(axis=1)
    out = Tensor(flat[np.arange(b), idx])

    def bwd(dy):
        g = np.zeros((b, h * w))
        g[np.arange(b), idx] = dy
        _accum(x, g.reshape(x.shape))

    return _finish(tape, out, bwd)


def positive_or_one(tape: Optional[Tape], x: Tensor) -> Tensor:
    """where(x > 0, x, 1); gradient passes only where x > 0."""
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 1.0))

    def bwd(dy):
        _accum(x, dy * mask)

    return _finish(tape, out, bwd)


def divide(tape: Optional[Tape], a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"divide: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data / b.data)

    def bwd(dy):
        _accum(a, dy / b.data)
        _accum(b, -dy * a.data / (b.data * b.data))

    return _finish(tape, out, bwd)


def divide_rows(tape: Optional[Tape], x: Tensor, s: Tensor) -> Tensor:
    """(B,H,W) divided per sample by (B,)."""
    if x.ndim != 3 or s.shape != (x.shape[0],):
        raise DimensionError(f"divide_rows: shapes {x.shape} vs {s.shape}")
    sb = s.data[:, None, None]
    out = Tensor(x.data / sb)

    def bwd(dy):
        _accum(x, dy / sb)
        _accum(s, -(dy * x.data).sum(axis=(1, 2)) / (s.data * s.data))

    return _finish(tape, out, bwd)


def take_column(tape: Optional[Tape], x: Tensor, idx) -> Tensor:
    """Select one column per row: (B,N) with idx (B,) -> (B,)."""
    if x.ndim != 2:
        raise DimensionError(f"take_column expects (B,N), got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, idx])

    def bwd(dy):
        g = np.zeros_like(x.data)
        g[rows, idx] = dy
        _accum(x, g)

    return _finish(tape, out, bwd)


def take_batch(tape: Optional[Tape], x: Tensor, idx) -> Tensor:
    """Select rows along the leading axis."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])

    def bwd(dy):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, dy)

    return _finish(tape, out, bwd)


# ---------------------------------------------------------------------------
# linear algebra / layer primitives


def dense(tape: Optional[Tape], x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (B,D) @ (D,M) + (M,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias {b.shape} incompatible with weight {w.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def bwd(dy):
        _accum(x, dy @ w.data.T)
        _accum(w, x.data.T @ dy)
        _accum(b, dy.sum(axis=0))

    return _finish(tape, out, bwd)


def const_matmul(tape: Optional[Tape], m: np.ndarray, x: Tensor) -> Tensor:
    """Multiply from the left by a constant matrix: (N,S) @ (S,E)."""
    m = np.asarray(m, dtype=np.float64)
    if x.ndim != 2 or m.shape[1] != x.shape[0]:
        raise DimensionError(f"const_matmul: {m.shape} @ {x.shape}")
    out = Tensor(m @ x.data)

    def bwd(dy):
        _accum(x, m.T @ dy)

    return _finish(tape, out, bwd)


def pairwise_sqdist(tape: Optional[Tape], q: Tensor, p: Union[Tensor, np.ndarray]) -> Tensor:
    """Squared Euclidean distances: (B,E) x (N,E) -> (B,N)."""
    p_is_tensor = isinstance(p, Tensor)
    pd = p.data if p_is_tensor else np.asarray(p, dtype=np.float64)
    if q.ndim != 2 or pd.ndim != 2 or q.shape[1] != pd.shape[1]:
        raise DimensionError(f"pairwise_sqdist: {q.shape} vs {pd.shape}")
    diff = q.data[:, None, :] - pd[None, :, :]  # (B,N,E)
    out = Tensor((diff * diff).sum(axis=2))

    def bwd(dy):
        weighted = dy[:, :, None] * diff
        _accum(q, 2.0 * weighted.sum(axis=1))
        if p_is_tensor:
            _accum(p, -2.0 * weighted.sum(axis=0))

    return _finish(tape, out, bwd)


def conv2d(tape: Optional[Tape], x: Tensor, kernels: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (C_in,H,W) or (B,C_in,H,W) with (C_out,C_in,kH,kW).

    Output spatial extent must divide exactly:
    H' = (H + 2*padding - kH)/stride + 1.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d: input must be 3-d or 4-d, got {x.shape}")
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be 4-d, got {kernels.shape}")
    b_, cin, h, w = xd.shape
    cout, ck, kh, kw = kernels.shape
    if ck != cin:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {cin}, kernels expect {ck}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias axis must be ({cout},), got {bias.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or (hp - kh) % stride != 0:
        raise DimensionError(f"conv2d: height axis {h} incompatible with kernel {kh}, "
                             f"stride {stride}, padding {padding}")
    if wp < kw or (wp - kw) % stride != 0:
        raise DimensionError(f"conv2d: width axis {w} incompatible with kernel {kw}, "
                             f"stride {stride}, padding {padding}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # channels-last unrolled-matrix path: one GEMM per kernel tap
    xp_cl = np.pad(np.ascontiguousarray(xd.transpose(0, 2, 3, 1)),
                   ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    k_cl = np.ascontiguousarray(kernels.data.transpose(2, 3, 1, 0))  # (kh,kw,Cin,Cout)

    def tap(i, j):
        return (slice(i, i + (ho - 1) * stride + 1, stride),
                slice(j, j + (wo - 1) * stride + 1, stride))

    y_flat = np.tile(bias.data, (b_ * ho * wo, 1))
    for i in range(kh):
        for j in range(kw):
            si, sj = tap(i, j)
            xs = np.ascontiguousarray(xp_cl[:, si, sj, :]).reshape(-1, cin)
            y_flat += xs @ k_cl[i, j]
    out4 = np.ascontiguousarray(y_flat.reshape(b_, ho, wo, cout).transpose(0, 3, 1, 2))
    out = Tensor(out4[0] if single else out4)

    def bwd(dy):
        dy4 = dy[None] if single else dy
        dy_flat = np.ascontiguousarray(dy4.transpose(0, 2, 3, 1)).reshape(-1, cout)
        dk_cl = np.empty_like(k_cl)
        dxp_cl = np.zeros_like(xp_cl)
        for i in range(kh):
            for j in range(kw):
                si, sj = tap(i, j)
                xs = np.ascontiguousarray(xp_cl[:, si, sj, :]).reshape(-1, cin)
                dk_cl[i, j] = xs.T @ dy_flat
                dxp_cl[:, si, sj, :] += (dy_flat @ k_cl[i, j].T).reshape(b_, ho, wo, cin)
        _accum(kernels, dk_cl.transpose(3, 2, 0, 1))
        _accum(bias, dy_flat.sum(axis=0))
        dx_cl = dxp_cl[:, padding:padding + h, padding:padding + w, :] if padding else dxp_cl
        dx = dx_cl.transpose(0, 3, 1, 2)
        _accum(x, dx[0] if single else dx)

    return _finish(tape, out, bwd)


def avg_pool2d(tape: Optional[Tape], x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling over (B,C,H,W) or (C,H,W)."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    b_, c, h, w = xd.shape
    if h % size or w % size:
        raise DimensionError(f"avg_pool2d: spatial axes {h}x{w} not divisible by {size}")
    inv = 1.0 / (size * size)
    pooled = np.zeros((b_, c, h // size, w // size))
    for i in range(size):
        for j in range(size):
            pooled += xd[:, :, i::size, j::size]
    pooled *= inv
    out = Tensor(pooled[0] if single else pooled)

    def bwd(dy):
        dy4 = dy[None] if single else dy
        g = np.empty_like(xd)
        spread = dy4 * inv
        for i in range(size):
            for j in range(size):
                g[:, :, i::size, j::size] = spread
        _accum(x, g[0] if single else g)

    return _finish(tape, out, bwd)


def global_avg_pool(tape: Optional[Tape], x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C) spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (B,C,H,W), got {x.shape}")
    b_, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(dy):
        _accum(x, np.broadcast_to(dy[:, :, None, None], x.shape) / (h * w))

    return _finish(tape, out, bwd)


def softmax(tape: Optional[Tape], x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; accepts (N,) or (B,N)."""
    if x.size == 0:
        raise DimensionError("softmax: empty score vector")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(dy):
        dot = (dy * y).sum(axis=-1, keepdims=True)
        _accum(x, (dy - dot) * y)

    return _finish(tape, out, bwd)


def cross_entropy(tape: Optional[Tape], probs: Tensor, targets) -> Tensor:
    """Mean negative log-probability of the target classes.

    ``probs`` is (B,N) (or (N,) for a single sample); targets are class
    indices already in [0, N).
    """
    single = probs.ndim == 1
    p = probs.data[None] if single else probs.data
    if p.ndim != 2 or p.shape[1] == 0:
        raise DimensionError(f"cross_entropy expects (B,N) probabilities, got {probs.shape}")
    t = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    if t.shape != (p.shape[0],):
        raise ContractError(f"cross_entropy: {p.shape[0]} samples but {t.shape} targets")
    if np.any(t < 0) or np.any(t >= p.shape[1]):
        raise ContractError(f"cross_entropy: target out of range for {p.shape[1]} classes")
    b_ = p.shape[0]
    rows = np.arange(b_)
    pt = p[rows, t]
    out = Tensor(np.mean(-np.log(np.maximum(pt, 1e-300))))

    def bwd(dy):
        g = np.zeros_like(p)
        g[rows, t] = -float(dy) / (b_ * np.maximum(pt, 1e-300))
        _accum(probs, g[0] if single else g)

    return _finish(tape, out, bwd)


# ---------------------------------------------------------------------------
# bilinear upsampling (corner-aligned), expressed as one constant GEMM


@lru_cache(maxsize=32)
def _bilinear_matrix(h: int, w: int, out_h: int, out_w: int) -> np.ndarray:
    """(h*w, out_h*out_w) interpolation weights, corner-aligned sampling."""
    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            lo = np.zeros(n_out, dtype=np.intp)
            frac = np.zeros(n_out)
        else:
            src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
            lo = np.floor(src).astype(np.intp)
            lo = np.minimum(lo, n_in - 2)
            frac = src - lo
        return lo, frac

    y0, fy = axis_weights(h, out_h)
    x0, fx = axis_weights(w, out_w)
    m = np.zeros((h * w, out_h * out_w))
    out_idx = np.arange(out_h * out_w)
    oy, ox = np.divmod(out_idx, out_w)
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        sy = np.minimum(y0[oy] + dy_, h - 1)
        sx = np.minimum(x0[ox] + dx_, w - 1)
        wy = np.where(dy_ == 0, 1.0 - fy[oy], fy[oy])
        wx = np.where(dx_ == 0, 1.0 - fx[ox], fx[ox])
        np.add.at(m, (sy * w + sx, out_idx), wy * wx)
    return m


def upsample_bilinear(tape: Optional[Tape], x: Tensor, out_h: int, out_w: int) -> Tensor:
    """(B,h,w) -> (B,out_h,out_w) corner-aligned bilinear interpolation."""
    if x.ndim != 3:
        raise DimensionError(f"upsample_bilinear expects (B,h,w), got {x.shape}")
    b_, h, w = x.shape
    m = _bilinear_matrix(h, w, out_h, out_w)
    out = Tensor((x.data.reshape(b_, h * w) @ m).reshape(b_, out_h, out_w))

    def bwd(dy):
        _accum(x, (dy.reshape(b_, -1) @ m.T).reshape(x.shape))

    return _finish(tape, out, bwd)


def channel_mix(tape: Optional[Tape], a: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted channel sum: (B,C,h,w) with constant (B,C) -> (B,h,w)."""
    wgt = np.asarray(weights, dtype=np.float64)
    if a.ndim != 4 or wgt.shape != a.shape[:2]:
        raise DimensionError(f"channel_mix: {a.shape} vs weights {wgt.shape}")
    out = Tensor(np.einsum("bc,bchw->bhw", wgt, a.data))

    def bwd(dy):
        _accum(a, wgt[:, :, None, None] * dy[:, None, :, :])

    return _finish(tape, out, bwd)


# ---------------------------------------------------------------------------
# finite-difference gradient checker


def grad_check(fn: Callable[[Optional[Tape], Sequence[Tensor]], Tensor],
               params: Union[Tensor, Sequence[Tensor]], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(tape, params)`` must evaluate a scalar Tensor; with ``tape=None``
    it must be a pure forward evaluation. Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    plist = [params] if isinstance(params, Tensor) else list(params)
    tape = Tape()
    for p in plist:
        p.grad = None
        tape.watch(p)
    out = fn(tape, plist)
    backward(tape, out)
    analytic = [p.grad.copy() for p in plist]

    worst = 0.0
    for p, ana in zip(plist, analytic):
        flat = p.data.ravel()
        aflat = ana.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn(None, plist).data)
            flat[i] = orig - h
            f_minus = float(fn(None, plist).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
