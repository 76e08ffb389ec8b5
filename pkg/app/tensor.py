"""
RxExtract v1.0.0 - Tensor Core
Dense float32 kernel for the detector and the recognizer

Conventions:
- A Tensor is a C-contiguous numpy float32 array (row-major)
- Reductions accumulate in float64 and round once to float32, so results
  do not depend on BLAS blocking or thread count
- conv2d is cross-correlation (no kernel flip) with zero same-padding
- Every function is pure; inputs are never modified
"""

import math
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import RangeError, ShapeError

Tensor = np.ndarray

# Largest float32 strictly below 1.0 and smallest positive float32
_F32_BELOW_ONE = np.nextafter(np.float32(1.0), np.float32(0.0))
_F32_TINY = np.finfo(np.float32).tiny


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> Tensor:
    """Coerce to a C-contiguous float32 array, optionally reshaped."""
    array = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if array.size != math.prod(shape):
            raise ShapeError(f"cannot view {array.size} elements as shape {shape}")
        array = array.reshape(shape)
    return array


def freeze(array: Tensor) -> Tensor:
    """Return a read-only float32 copy, safe to share across threads."""
    frozen = as_tensor(array).copy()
    frozen.flags.writeable = False
    return frozen


def is_finite(*tensors: Iterable[Tensor]) -> bool:
    return all(bool(np.all(np.isfinite(t))) for t in tensors)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m x k] @ [k x n] -> [m x n]"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    product = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return product.astype(np.float32)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got shape {tuple(x.shape)}")
    wide = x.astype(np.float64)
    wide = np.exp(wide - wide.max(axis=1, keepdims=True))
    wide /= wide.sum(axis=1, keepdims=True)
    return wide.astype(np.float32)


def sigmoid_map(x: Tensor) -> Tensor:
    """Elementwise logistic function, kept strictly inside (0, 1)."""
    wide = np.asarray(x, dtype=np.float64)
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(wide))
    out = np.where(wide >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.float32)
    return np.clip(out, _F32_TINY, _F32_BELOW_ONE)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, np.float32(0.0))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias, weight stored [in x out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = (out.astype(np.float64) + bias.astype(np.float64)).astype(np.float32)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {tuple(a.shape)} + {tuple(b.shape)}")
    return (a.astype(np.float64) + b.astype(np.float64)).astype(np.float32)


def conv2d(input: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Same-padded 2-D cross-correlation.

    Args:
        input: [C_in x H x W]
        kernel: [C_out x C_in x k x k], k odd
        bias: [C_out] (zeros when omitted)

    Returns:
        [C_out x H x W]
    """
    if input.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [O,C,k,k], got {tuple(input.shape)} and {tuple(kernel.shape)}")
    c_out, c_in, kh, kw = kernel.shape
    if c_in != input.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input has {input.shape[0]}, kernel expects {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if bias is None:
        bias = np.zeros(c_out, dtype=np.float32)
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} does not match {c_out} output channels")

    pad = kh // 2
    padded = np.pad(input.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    # windows: [C_in, H, W, k, k]
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    out = np.einsum('chwij,ocij->ohw', windows, kernel.astype(np.float64))
    out += bias.astype(np.float64)[:, None, None]
    return out.astype(np.float32)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """Replicate every pixel of the last two axes into a 2x2 block."""
    if x.ndim < 2:
        raise ShapeError(f"upsample needs at least 2 spatial axes, got shape {tuple(x.shape)}")
    return np.ascontiguousarray(x.repeat(2, axis=-2).repeat(2, axis=-1))


def max_pool_2x(x: Tensor) -> Tensor:
    """Stride-2 2x2 max-pool over [C x H x W] with even H, W."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool_2x needs even spatial size, got {h}x{w}")
    return np.ascontiguousarray(x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4)))


def bilinear_sample(map: Tensor, x: float, y: float) -> float:
    """
    Sample a [H x W] map at real coordinates (x, y).

    The value is the weighted sum of the four surrounding grid values, each
    weight being the product of (1 - distance) along both axes. The caller
    clamps; out-of-range coordinates raise RangeError.
    """
    if map.ndim != 2:
        raise ShapeError(f"bilinear_sample expects [H,W], got {tuple(map.shape)}")
    h, w = map.shape
    if not (0.0 <= x <= w - 1) or not (0.0 <= y <= h - 1):
        raise RangeError(f"sample point ({x}, {y}) outside [0, {w - 1}] x [0, {h - 1}]")

    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return float(
        (1.0 - fx) * (1.0 - fy) * float(map[y0, x0])
        + fx * (1.0 - fy) * float(map[y0, x1])
        + (1.0 - fx) * fy * float(map[y1, x0])
        + fx * fy * float(map[y1, x1])
    )


def bilinear_sample_channels(maps: Tensor, xs: np.ndarray, ys: np.ndarray) -> Tensor:
    """
    Vectorised bilinear_sample over every channel of [C x H x W] at the
    points (xs[i], ys[i]); returns [C x n] in float64 order of operations
    identical to bilinear_sample.
    """
    c, h, w = maps.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.min(initial=0.0) < 0 or ys.min(initial=0.0) < 0 or xs.max(initial=0.0) > w - 1 or ys.max(initial=0.0) > h - 1:
        raise RangeError(f"sample points outside [0, {w - 1}] x [0, {h - 1}]")

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    wide = maps.astype(np.float64)
    return (
        (1.0 - fx) * (1.0 - fy) * wide[:, y0, x0]
        + fx * (1.0 - fy) * wide[:, y0, x1]
        + (1.0 - fx) * fy * wide[:, y1, x0]
        + fx * fy * wide[:, y1, x1]
    )
