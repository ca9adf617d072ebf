"""Differentiable building blocks: convolution, sampling, attention math.

Convolutions are cross-correlations (no kernel flip), evaluated through
im2col views so the heavy lifting stays in BLAS.  All three conv kernels
(forward, input-gradient, weight-gradient) are shared between ``conv2d``
and ``conv_transpose2d``, which are adjoints of each other.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError
from .tensor import Tensor, _record, as_tensor


def _sliding_windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d channels: input {x.shape} vs weight {w.shape}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    xp = x if padding == 0 else np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == kw == 1 and stride == 1:
        y = np.tensordot(xp, w[:, :, 0, 0], axes=([1], [1]))  # [B,H,W,O]
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    win = _sliding_windows(xp, kh, kw, stride)  # [B,C,Ho,Wo,kh,kw]
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [B,Ho,Wo,O]
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv2d_grad_weight(
    x: np.ndarray, gy: np.ndarray, stride: int, padding: int, k_hw: tuple[int, int]
) -> np.ndarray:
    _, _, Ho, Wo = gy.shape
    kh, kw = k_hw
    xp = x if padding == 0 else np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _sliding_windows(xp, kh, kw, stride)[:, :, :Ho, :Wo]
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # [O,C,kh,kw]


def _conv2d_grad_input(
    gy: np.ndarray, w: np.ndarray, stride: int, padding: int, in_hw: tuple[int, int]
) -> np.ndarray:
    B, O, Ho, Wo = gy.shape
    _, _, kh, kw = w.shape
    H, W = in_hw
    Hp, Wp = H + 2 * padding, W + 2 * padding
    gd = np.zeros((B, O, (Ho - 1) * stride + 1, (Wo - 1) * stride + 1), dtype=gy.dtype)
    gd[:, :, ::stride, ::stride] = gy
    # extra bottom/right zeros absorb the stride remainder of the forward pass
    dh = Hp - ((Ho - 1) * stride + kh)
    dw = Wp - ((Wo - 1) * stride + kw)
    gdp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1 + dh), (kw - 1, kw - 1 + dw)))
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # [C,O,kh,kw], flipped
    gxp = _conv2d_raw(gdp, np.ascontiguousarray(wf), 1, 0)
    return gxp[:, :, padding : padding + H, padding : padding + W]


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x[B,C,H,W] with w[O,C,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d operands, got {x.shape}, {w.shape}")
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    H, W = x.shape[2], x.shape[3]
    out = Tensor(_conv2d_raw(x.data, w.data, stride, padding))

    def bwd(g):
        gx = _conv2d_grad_input(g, w.data, stride, padding, (H, W))
        gw = _conv2d_grad_weight(x.data, g, stride, padding, w.shape[2:])
        return gx, gw

    return _record(out, (x, w), bwd)


def conv_transpose2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d: x[B,C,H,W], w[C,O,kh,kw] -> [B,O,(H-1)s-2p+kh,...]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"conv_transpose2d channels: input {x.shape} vs weight {w.shape}"
        )
    _, _, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    out_hw = ((H - 1) * stride - 2 * padding + kh, (W - 1) * stride - 2 * padding + kw)
    out = Tensor(_conv2d_grad_input(x.data, w.data, stride, padding, out_hw))

    def bwd(g):
        gx = _conv2d_raw(g, w.data, stride, padding)
        gw = _conv2d_grad_weight(g, x.data, stride, padding, w.shape[2:])
        return gx, gw

    return _record(out, (x, w), bwd)


def bilinear_sample(feat, grid) -> tuple[Tensor, np.ndarray]:
    """Sample feat[C,H,W] at absolute pixel coordinates grid[H',W',2].

    Coordinate (x, y) addresses the center of pixel (col=x, row=y).  Samples
    whose point leaves [0, W-1] x [0, H-1] return 0; the boolean validity
    mask marks in-bounds points.  Differentiable in feat always and in grid
    when grid is a gradient-tracked Tensor.
    """
    feat = as_tensor(feat)
    grid_t = grid if isinstance(grid, Tensor) else None
    gdata = grid.data if grid_t is not None else np.asarray(grid, dtype=np.float64)
    if feat.ndim != 3 or gdata.ndim != 3 or gdata.shape[-1] != 2:
        raise DimensionError(
            f"bilinear_sample expects feat[C,H,W] and grid[H',W',2], got {feat.shape}, {gdata.shape}"
        )
    C, H, W = feat.shape
    x, y = gdata[..., 0], gdata[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx, wy = x - x0, y - y0
    x0i, y0i = x0.astype(np.int64), y0.astype(np.int64)

    corners = []
    for dx, dy, wgt in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)),
        (0, 1, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        xi, yi = x0i + dx, y0i + dy
        inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        xc, yc = np.clip(xi, 0, W - 1), np.clip(yi, 0, H - 1)
        fetched = feat.data[:, yc, xc] * inb  # [C,H',W']
        corners.append((xc, yc, wgt, inb, fetched))

    out_data = np.zeros((C,) + gdata.shape[:2])
    for _, _, wgt, _, fetched in corners:
        out_data += fetched * wgt
    out = Tensor(out_data)
    valid = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)

    inputs = (feat,) if grid_t is None else (feat, grid_t)

    def bwd(g):
        gfeat = np.zeros_like(feat.data)
        gf = gfeat.reshape(C, -1)
        rows = np.arange(C)[:, None]
        for xc, yc, wgt, inb, _ in corners:
            idx = (yc * W + xc).ravel()
            vals = g.reshape(C, -1) * (wgt * inb).ravel()
            np.add.at(gf, (rows, idx[None, :]), vals)
        if grid_t is None:
            return (gfeat,)
        (_, _, _, _, v00), (_, _, _, _, v10), (_, _, _, _, v01), (_, _, _, _, v11) = corners
        gx = (g * ((v10 - v00) * (1 - wy) + (v11 - v01) * wy)).sum(axis=0)
        gy_ = (g * ((v01 - v00) * (1 - wx) + (v11 - v10) * wx)).sum(axis=0)
        return gfeat, np.stack([gx, gy_], axis=-1)

    return _record(out, inputs, bwd), valid


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _record(out, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bwd)


def layer_normalize(x, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Zero-mean, unit-variance normalization along `axis` (no learned affine)."""
    from .tensor import sqrt, tmean

    x = as_tensor(x)
    mu = tmean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = tmean(xc * xc, axis=axis, keepdims=True)
    return xc / sqrt(var + eps)


def silu_gate(gate, value) -> Tensor:
    """SwiGLU-style gating: silu(gate) * value, shapes must match."""
    from .tensor import silu

    gate, value = as_tensor(gate), as_tensor(value)
    if gate.shape != value.shape:
        raise DimensionError(f"silu_gate shapes differ: {gate.shape} vs {value.shape}")
    return silu(gate) * value
