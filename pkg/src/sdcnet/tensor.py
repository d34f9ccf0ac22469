"""Dense tensor primitives shared by every other module.

Tensors are plain numpy arrays: rank-4 ``(batch, channels, height, width)``
for activations and weights, rank-2 for matmul workspaces. Layout is C-order
(width fastest). The default element type is float32; every kernel here
preserves the dtype it is given so the same code can run a float64 check path.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO

import numpy as np

DTYPE = np.float32
SGT_MAGIC = b"SGT1"
_SGT_HEADER = struct.Struct("<4s4I")


class ShapeError(ValueError):
    """Raised when tensor dimensions do not satisfy an operation's contract."""


class FormatError(ValueError):
    """Raised when a binary file does not follow its declared layout."""


def check_tensor4(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (B, C, H, W), got shape {x.shape}")
    if min(x.shape) <= 0:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def pad2d(x: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Zero-pad the two spatial axes symmetrically."""
    check_tensor4(x)
    if pad_h < 0 or pad_w < 0:
        raise ShapeError(f"padding must be non-negative, got ({pad_h}, {pad_w})")
    if pad_h == 0 and pad_w == 0:
        return x.copy()
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * pad_h, w + 2 * pad_w), dtype=x.dtype)
    out[:, :, pad_h : pad_h + h, pad_w : pad_w + w] = x
    return out


def crop2d(x: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Inverse of :func:`pad2d`: drop ``pad_h`` rows and ``pad_w`` columns per side."""
    check_tensor4(x)
    h, w = x.shape[2], x.shape[3]
    if 2 * pad_h >= h or 2 * pad_w >= w:
        raise ShapeError(f"cannot crop ({pad_h}, {pad_w}) from spatial dims {(h, w)}")
    return x[:, :, pad_h : h - pad_h, pad_w : w - pad_w]


def _pooled_shape(shape: tuple[int, ...], channels_last: bool) -> tuple[int, ...]:
    if channels_last:
        b, h, w, c = shape
        return (b, h // 2, w // 2, c)
    b, c, h, w = shape
    return (b, c, h // 2, w // 2)


def maxpool2x2(x: np.ndarray, channels_last: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pooling.

    Returns the pooled tensor and, for each output element, the flat index
    (into ``x.ravel()``) of the input element that won. Ties go to the
    smallest flat index, i.e. the first window element in row-major order.
    ``channels_last`` pools a (B, H, W, C) array instead of (B, C, H, W).
    """
    check_tensor4(x)
    if channels_last:
        b, h, w, c = x.shape
    else:
        b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {(h, w)}")
    ho, wo = h // 2, w // 2
    if channels_last:
        views = [x[:, dy::2, dx::2, :] for dy in (0, 1) for dx in (0, 1)]
    else:
        views = [x[:, :, dy::2, dx::2] for dy in (0, 1) for dx in (0, 1)]
    # Views are visited in row-major window order and only a strictly larger
    # value replaces the running max, so ties keep the smallest flat index.
    out = views[0].copy()
    arg = np.zeros(out.shape, dtype=np.int64)
    for a, v in enumerate(views[1:], start=1):
        wins = v > out
        np.copyto(out, v, where=wins)
        arg[wins] = a

    dy, dx = np.divmod(arg, 2)
    if channels_last:
        rows = 2 * np.arange(ho).reshape(1, ho, 1, 1) + dy
        cols = 2 * np.arange(wo).reshape(1, 1, wo, 1) + dx
        idx = ((np.arange(b).reshape(b, 1, 1, 1) * h + rows) * w + cols) * c + np.arange(c)
    else:
        rows = 2 * np.arange(ho).reshape(1, 1, ho, 1) + dy
        cols = 2 * np.arange(wo).reshape(1, 1, 1, wo) + dx
        plane = np.arange(b).reshape(b, 1, 1, 1) * c + np.arange(c).reshape(1, c, 1, 1)
        idx = (plane * h + rows) * w + cols
    return out, idx


def maxpool2x2_backward(
    grad_out: np.ndarray,
    idx: np.ndarray,
    in_shape: tuple[int, int, int, int],
    channels_last: bool = False,
) -> np.ndarray:
    """Route pooled gradients back to the recorded argmax positions."""
    in_shape = tuple(in_shape)
    expected = _pooled_shape(in_shape, channels_last)
    h, w = in_shape[1:3] if channels_last else in_shape[2:]
    if h % 2 or w % 2 or grad_out.shape != expected or idx.shape != expected:
        raise ShapeError(
            f"grad_out {grad_out.shape} / idx {idx.shape} do not match pooled dims {expected}"
        )
    grad_in = np.zeros(int(np.prod(in_shape)), dtype=grad_out.dtype)
    # Windows are disjoint, so each input position receives at most one value.
    grad_in[idx.ravel()] = grad_out.ravel()
    return grad_in.reshape(in_shape)


def write_sgt(fh: BinaryIO, x: np.ndarray) -> None:
    """Write one tensor in the ``.sgt`` layout to an open binary stream."""
    if x.ndim != 4:
        raise ShapeError(f".sgt stores rank-4 tensors, got shape {x.shape}")
    fh.write(_SGT_HEADER.pack(SGT_MAGIC, *x.shape))
    fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_sgt(fh: BinaryIO) -> np.ndarray:
    head = fh.read(_SGT_HEADER.size)
    if len(head) != _SGT_HEADER.size:
        raise FormatError("truncated .sgt header")
    magic, *dims = _SGT_HEADER.unpack(head)
    if magic != SGT_MAGIC:
        raise FormatError(f"bad .sgt magic {magic!r}")
    count = int(np.prod(dims))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"truncated .sgt payload: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(dims)


def save_sgt(path: str | os.PathLike, x: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_sgt(fh, x)


def load_sgt(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        x = read_sgt(fh)
        if fh.read(1):
            raise FormatError(f"trailing bytes after tensor in {os.fspath(path)}")
    return x
