"""Semi-dilated 2-D convolution.

A semi-dilated convolution is an ordinary k x k convolution whose taps are
spread ``d_h`` rows apart vertically and ``d_w`` columns apart horizontally,
with ``d_h`` and ``d_w`` chosen independently. On wide inputs (frequency x
time images with W >> H) this grows the receptive field along time without
touching frequency resolution, and without adding parameters.

The fast path works channels-last and replaces im2col with one GEMM per
tap over row blocks of the flattened padded input (see :class:`_TapGrid`);
the public functions take and return (B, C, H, W).
Two slower references live alongside it and are used only by tests and the
``gradcheck`` command: :func:`sdconv_direct` evaluates the defining sum tap
by tap, and :func:`standard_conv2d` is an undilated correlation built on
:func:`scipy.signal.correlate`, which together with :func:`expand_kernel`
gives the zero-insertion equivalence check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np
from scipy import signal

from .tensor import ShapeError, check_tensor4

Padding = Literal["same", "valid"]


class DilationVector(NamedTuple):
    d_h: int
    d_w: int

    def validate(self) -> None:
        if int(self.d_h) != self.d_h or int(self.d_w) != self.d_w or self.d_h < 1 or self.d_w < 1:
            raise ValueError(f"dilation rates must be positive integers, got {tuple(self)}")


@dataclass(frozen=True)
class ConvSpec:
    k: int
    dilation: DilationVector
    in_channels: int
    out_channels: int
    padding: Padding = "same"

    def __post_init__(self) -> None:
        object.__setattr__(self, "dilation", DilationVector(*self.dilation))
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 1, got {self.k}")
        self.dilation.validate()
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def pads(self) -> tuple[int, int]:
        if self.padding == "valid":
            return 0, 0
        half = (self.k - 1) // 2
        return half * self.dilation.d_h, half * self.dilation.d_w

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        rf_h, rf_w = receptive_field(self.k, self.dilation)
        ph, pw = self.pads
        return h + 2 * ph - rf_h + 1, w + 2 * pw - rf_w + 1


@dataclass
class ConvParams:
    weights: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def receptive_field(k: int, d: DilationVector | tuple[int, int]) -> tuple[int, int]:
    """Height and width of the input window seen by one output element."""
    d_h, d_w = d
    return (k - 1) * d_h + 1, (k - 1) * d_w + 1


def effective_tap_offsets(spec: ConvSpec, centered: bool = False) -> list[tuple[int, int]]:
    """Input offsets ``(dy, dx)`` of the k*k taps, row-major over the kernel.

    Offsets are relative to the top-left tap, or to the kernel centre when
    ``centered`` is set.
    """
    d_h, d_w = spec.dilation
    half = (spec.k - 1) // 2 if centered else 0
    return [
        ((i - half) * d_h, (j - half) * d_w) for i in range(spec.k) for j in range(spec.k)
    ]


def _check(x: np.ndarray, spec: ConvSpec, params: ConvParams) -> tuple[int, int]:
    check_tensor4(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    want = (spec.out_channels, spec.in_channels, spec.k, spec.k)
    if params.weights.shape != want or params.bias.shape != (spec.out_channels,):
        raise ShapeError(
            f"params {params.weights.shape}/{params.bias.shape} do not match the ConvSpec {want}"
        )
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        rf = receptive_field(spec.k, spec.dilation)
        raise ShapeError(f"input {x.shape[2:]} is smaller than the receptive field {rf}")
    return ho, wo


def _pad_nhwc(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + w] = x
    return xp


@dataclass(frozen=True)
class _TapGrid:
    """Geometry of a stride-1 dilated convolution over a flattened padded input.

    With the padded (B, Hp, Wp, C) input viewed as a (B*Hp*Wp, C) matrix,
    tap (i, j) reads the contiguous row block starting at
    ``i*d_h*Wp + j*d_w``. Every output position p = (b*Hp + y)*Wp + x with
    y < Ho, x < Wo lies in the first ``n_virtual`` rows, so a convolution is
    k*k zero-copy GEMMs over that "virtual" grid followed by one crop. The
    rows belonging to x >= Wo or y >= Ho are computed and thrown away.
    """

    batch: int
    hp: int
    wp: int
    ho: int
    wo: int
    offsets: tuple[int, ...]
    n_virtual: int

    @classmethod
    def build(cls, b: int, h: int, w: int, k: int, dilation, pads) -> "_TapGrid":
        d_h, d_w = dilation
        hp, wp = h + 2 * pads[0], w + 2 * pads[1]
        offsets = tuple(i * d_h * wp + j * d_w for i in range(k) for j in range(k))
        return cls(
            b, hp, wp, hp - (k - 1) * d_h, wp - (k - 1) * d_w, offsets, b * hp * wp - offsets[-1]
        )

    def crop(self, flat: np.ndarray) -> np.ndarray:
        full = flat.reshape(self.batch, self.hp, self.wp, -1)
        return np.ascontiguousarray(full[:, : self.ho, : self.wo])

    def scatter(self, grad_out: np.ndarray) -> np.ndarray:
        full = np.zeros((self.batch, self.hp, self.wp, grad_out.shape[-1]), dtype=grad_out.dtype)
        full[:, : self.ho, : self.wo] = grad_out
        return full.reshape(-1, grad_out.shape[-1])[: self.n_virtual]


def conv_nhwc_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None,
    dilation: tuple[int, int],
    pads: tuple[int, int],
) -> np.ndarray:
    """Channels-last stride-1 dilated convolution; (B, H, W, C) -> (B, Ho, Wo, O)."""
    o, c, k, _ = weights.shape
    b, h, w, _ = x.shape
    grid = _TapGrid.build(b, h, w, k, dilation, pads)
    flat = _pad_nhwc(x, *pads).reshape(-1, c)
    taps = np.ascontiguousarray(weights.transpose(2, 3, 1, 0)).reshape(k * k, c, o)
    nv = grid.n_virtual
    acc = np.empty((flat.shape[0], o), dtype=x.dtype)
    out = acc[:nv]
    tmp = np.empty_like(out)
    for t, off in enumerate(grid.offsets):
        if t == 0:
            np.matmul(flat[off : off + nv], taps[t], out=out)
        else:
            np.matmul(flat[off : off + nv], taps[t], out=tmp)
            out += tmp
    if bias is not None:
        out += bias
    return grid.crop(acc)


def conv_nhwc_backward(
    x: np.ndarray,
    weights: np.ndarray,
    dilation: tuple[int, int],
    pads: tuple[int, int],
    grad_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv_nhwc_forward` w.r.t. input, weights and bias.

    Each tap's weight gradient is one GEMM against the same input row block
    the forward pass read; the input gradient scatter-adds each tap's
    contribution back onto that block, then drops the padding.
    """
    o, c, k, _ = weights.shape
    b, h, w, _ = x.shape
    grid = _TapGrid.build(b, h, w, k, dilation, pads)
    if grad_out.shape != (b, grid.ho, grid.wo, o):
        raise ShapeError(f"grad_out has shape {grad_out.shape}, expected {(b, grid.ho, grid.wo, o)}")
    grad_b = grad_out.sum(axis=(0, 1, 2), dtype=np.float64).astype(grad_out.dtype)
    flat = _pad_nhwc(x, *pads).reshape(-1, c)
    gv = grid.scatter(grad_out)
    nv = grid.n_virtual
    grad_taps = np.empty((k * k, c, o), dtype=x.dtype)
    for t, off in enumerate(grid.offsets):
        np.matmul(flat[off : off + nv].T, gv, out=grad_taps[t])
    grad_w = np.ascontiguousarray(grad_taps.reshape(k, k, c, o).transpose(3, 2, 0, 1))
    grad_x = None
    if need_input_grad:
        taps_t = np.ascontiguousarray(weights.transpose(2, 3, 0, 1)).reshape(k * k, o, c)
        gflat = np.zeros_like(flat)
        tmp = np.empty((nv, c), dtype=x.dtype)
        for t, off in enumerate(grid.offsets):
            np.matmul(gv, taps_t[t], out=tmp)
            gflat[off : off + nv] += tmp
        ph, pw = pads
        gfull = gflat.reshape(b, grid.hp, grid.wp, c)
        grad_x = np.ascontiguousarray(gfull[:, ph : ph + h, pw : pw + w])
    return grad_x, grad_w, grad_b


def sdconv_forward(x: np.ndarray, spec: ConvSpec, params: ConvParams) -> np.ndarray:
    """Semi-dilated convolution, stride 1.

    ``out[b, o, y, x] = bias[o] + sum_{c,i,j} w[o, c, i, j] * xpad[b, c, y + i*d_h, x + j*d_w]``
    where ``xpad`` is ``x`` zero-padded by ``spec.pads``.
    """
    _check(x, spec, params)
    out = conv_nhwc_forward(
        x.transpose(0, 2, 3, 1), params.weights, params.bias, spec.dilation, spec.pads
    )
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def sdconv_backward(
    x: np.ndarray,
    spec: ConvSpec,
    params: ConvParams,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`sdconv_forward` w.r.t. input, weights and bias.

    ``grad_x`` is ``None`` when ``need_input_grad`` is false.
    """
    ho, wo = _check(x, spec, params)
    b = x.shape[0]
    if grad_out.shape != (b, spec.out_channels, ho, wo):
        raise ShapeError(
            f"grad_out has shape {grad_out.shape}, forward output is {(b, spec.out_channels, ho, wo)}"
        )
    gx, gw, gb = conv_nhwc_backward(
        x.transpose(0, 2, 3, 1),
        params.weights,
        spec.dilation,
        spec.pads,
        grad_out.transpose(0, 2, 3, 1),
        need_input_grad,
    )
    if gx is not None:
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    return gx, gw, gb


def expand_kernel(params: ConvParams, d: DilationVector | tuple[int, int]) -> ConvParams:
    """Equivalent undilated kernel: original taps at (i*d_h, j*d_w), zeros between."""
    d_h, d_w = d
    o, c, kh, kw = params.weights.shape
    big = np.zeros((o, c, (kh - 1) * d_h + 1, (kw - 1) * d_w + 1), dtype=params.weights.dtype)
    big[:, :, ::d_h, ::d_w] = params.weights
    return ConvParams(big, params.bias.copy())


# --- reference implementations (oracles) -----------------------------------


def sdconv_direct(x: np.ndarray, spec: ConvSpec, params: ConvParams) -> np.ndarray:
    """Tap-by-tap evaluation of the defining sum, in float64."""
    ho, wo = _check(x, spec, params)
    ph, pw = spec.pads
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    w = params.weights.astype(np.float64)
    out = np.zeros((x.shape[0], spec.out_channels, ho, wo))
    for i, j in np.ndindex(spec.k, spec.k):
        y0, x0 = i * spec.dilation.d_h, j * spec.dilation.d_w
        window = xp[:, :, y0 : y0 + ho, x0 : x0 + wo]
        out += np.einsum("oc,bchw->bohw", w[:, :, i, j], window)
    return out + params.bias.astype(np.float64).reshape(1, -1, 1, 1)


def standard_conv2d(x: np.ndarray, params: ConvParams, padding: Padding = "same") -> np.ndarray:
    """Plain stride-1, dilation-1 cross-correlation with an arbitrary (odd) kernel, float64.

    Built on scipy so that it shares no code with the fast path.
    """
    o, c, kh, kw = params.weights.shape
    if x.shape[1] != c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {c}")
    xd = x.astype(np.float64)
    if padding == "same":
        xd = np.pad(xd, ((0, 0), (0, 0), ((kh - 1) // 2,) * 2, ((kw - 1) // 2,) * 2))
    w = params.weights.astype(np.float64)
    ho, wo = xd.shape[2] - kh + 1, xd.shape[3] - kw + 1
    out = np.empty((x.shape[0], o, ho, wo))
    for b in range(x.shape[0]):
        for oc in range(o):
            out[b, oc] = signal.correlate(xd[b], w[oc], mode="valid")[0]
    return out + params.bias.astype(np.float64).reshape(1, -1, 1, 1)
