"""Raw clip -> 30 s segments -> Morlet scalogram tensors.

A scalogram row is the magnitude of the signal convolved with an analytic
Morlet wavelet tuned to one frequency; rows are ordered from high to low
frequency. Magnitudes are then compressed with ``log1p`` and z-scored per
channel before they reach the network.
"""

from __future__ import annotations

import functools
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .tensor import DTYPE, FormatError, ShapeError

CLIP_MAGIC = b"CLP1"
_CLIP_HEADER = struct.Struct("<4sIIfB")
# Wavelet kernels are truncated where the Gaussian envelope falls below
# exp(-TRUNCATE**2 / 2) of its peak.
TRUNCATE = 5.0


@dataclass
class RawClip:
    samples: np.ndarray  # (n_channels, n_samples) float32
    sample_rate_hz: float
    label: int
    clip_id: str
    segment_index: int | None = None

    def __post_init__(self) -> None:
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=DTYPE))
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 (interictal) or 1 (preictal), got {self.label}")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class CwtConfig:
    n_freqs: int = 100
    f_min_hz: float = 0.5
    f_max_hz: float = 50.0
    morlet_omega0: float = 6.0
    time_decimation: int = 2

    def validate(self, sample_rate_hz: float) -> None:
        if self.n_freqs < 2:
            raise ValueError(f"need at least 2 frequency bins, got {self.n_freqs}")
        if not 0 < self.f_min_hz < self.f_max_hz < sample_rate_hz / 2:
            raise ValueError(
                f"need 0 < f_min < f_max < Nyquist ({sample_rate_hz / 2} Hz), "
                f"got [{self.f_min_hz}, {self.f_max_hz}]"
            )
        if self.time_decimation < 1 or int(self.time_decimation) != self.time_decimation:
            raise ValueError(f"time_decimation must be a positive integer, got {self.time_decimation}")
        if self.morlet_omega0 <= 0:
            raise ValueError("morlet_omega0 must be positive")


@dataclass
class ScalogramTensor:
    """One segment's scalogram, stored channel-first as (N_ch, H, W)."""

    values: np.ndarray
    freqs_hz: np.ndarray
    segment_index: int
    clip_id: str
    label: int
    extra: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(H, W, N_ch): frequency bins, time steps, channels."""
        c, h, w = self.values.shape
        return h, w, c

    def as_tensor4(self) -> np.ndarray:
        return self.values[None]


def segment_clip(clip: RawClip, segment_seconds: float = 30.0) -> list[RawClip]:
    """Split a clip into consecutive, non-overlapping segments.

    Samples after the last whole segment are dropped with a warning.
    """
    seg_len = int(round(segment_seconds * clip.sample_rate_hz))
    if seg_len <= 0 or seg_len > clip.n_samples:
        raise ValueError(
            f"segment of {seg_len} samples does not fit in a clip of {clip.n_samples} samples"
        )
    n_seg, rest = divmod(clip.n_samples, seg_len)
    if rest:
        warnings.warn(
            f"clip {clip.clip_id}: dropping {rest} trailing samples "
            f"({n_seg} segments of {seg_len})",
            stacklevel=2,
        )
    return [
        RawClip(
            clip.samples[:, i * seg_len : (i + 1) * seg_len],
            clip.sample_rate_hz,
            clip.label,
            clip.clip_id,
            segment_index=i,
        )
        for i in range(n_seg)
    ]


def frequency_grid(cfg: CwtConfig) -> np.ndarray:
    """Log-spaced centre frequencies, f_max first, f_min last."""
    return np.geomspace(cfg.f_max_hz, cfg.f_min_hz, cfg.n_freqs)


def morlet_scales(freqs_hz: np.ndarray, omega0: float) -> np.ndarray:
    """Scale (seconds) whose Morlet spectrum peaks at each frequency."""
    return omega0 / (2 * np.pi * np.asarray(freqs_hz))


def kernel_length(cfg: CwtConfig, fs: float) -> int:
    """Number of taps of the widest (lowest-frequency) wavelet."""
    s_max = morlet_scales(cfg.f_min_hz, cfg.morlet_omega0)
    return 2 * int(np.ceil(TRUNCATE * s_max * fs)) + 1


def morlet_kernels(cfg: CwtConfig, fs: float) -> np.ndarray:
    """(H, L) complex Morlet kernels, centred at tap (L-1)/2, unit L2 norm each.

    ``psi(t) = exp(i*omega0*t/s) * exp(-(t/s)**2 / 2)``; every kernel is
    padded to the length of the widest one so they share a centre.
    """
    freqs = frequency_grid(cfg)
    scales = morlet_scales(freqs, cfg.morlet_omega0)
    n = kernel_length(cfg, fs)
    t = (np.arange(n) - (n - 1) / 2) / fs
    u = t[None, :] / scales[:, None]
    env = np.exp(-0.5 * u**2)
    env[np.abs(u) > TRUNCATE] = 0.0
    psi = env * np.exp(1j * cfg.morlet_omega0 * u)
    psi /= np.sqrt(np.sum(np.abs(psi) ** 2, axis=1, keepdims=True))
    return psi


@functools.lru_cache(maxsize=8)
def _kernel_spectra(cfg: CwtConfig, fs: float, n_signal: int) -> tuple[np.ndarray, int, int]:
    psi = morlet_kernels(cfg, fs)
    m = psi.shape[1]
    n_fft = sfft.next_fast_len(n_signal + m - 1)
    spec = sfft.fft(psi, n_fft, axis=1).astype(np.complex64)
    spec.setflags(write=False)
    return spec, n_fft, (m - 1) // 2


def morlet_cwt_magnitude(
    signal: np.ndarray, cfg: CwtConfig, fs: float
) -> np.ndarray:
    """|signal * psi_f| for every grid frequency, sampled every ``time_decimation`` steps.

    Works on a single 1-D signal or a (channels, samples) stack; the output
    is (H, ceil(n / decimation)) or (channels, H, ceil(n / decimation)).
    Convolution is linear (zero-padded FFT product), aligned so output
    column t is centred on input sample ``t * decimation``.
    """
    cfg.validate(fs)
    x = np.asarray(signal, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[-1]
    need = kernel_length(cfg, fs)
    if n < need:
        raise ShapeError(
            f"signal of {n} samples is shorter than the widest wavelet ({need} samples)"
        )
    spec, n_fft, centre = _kernel_spectra(cfg, fs, n)
    xs = sfft.fft(x.astype(np.float32), n_fft, axis=-1)
    out = np.empty((x.shape[0], cfg.n_freqs, -(-n // cfg.time_decimation)), dtype=DTYPE)
    keep = slice(centre, centre + n, cfg.time_decimation)
    for ch in range(x.shape[0]):
        full = sfft.ifft(spec * xs[ch], axis=-1)
        np.abs(full[:, keep], out=out[ch])
    return out[0] if single else out


def normalize_scalogram(mag: np.ndarray) -> np.ndarray:
    """log1p, then zero mean / unit variance within each channel of a (C, H, W) stack."""
    z = np.log1p(mag.astype(np.float64))
    mean = z.mean(axis=(1, 2), keepdims=True)
    std = z.std(axis=(1, 2), keepdims=True)
    z = (z - mean) / np.where(std > 0, std, 1.0)
    return z.astype(DTYPE)


def build_scalogram(segment: RawClip, cfg: CwtConfig, normalize: bool = True) -> ScalogramTensor:
    mag = morlet_cwt_magnitude(segment.samples, cfg, segment.sample_rate_hz)
    values = normalize_scalogram(mag) if normalize else mag
    return ScalogramTensor(
        values,
        frequency_grid(cfg),
        segment.segment_index if segment.segment_index is not None else 0,
        segment.clip_id,
        segment.label,
    )


def write_clip(path: str | os.PathLike, clip: RawClip) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _CLIP_HEADER.pack(
                CLIP_MAGIC, clip.n_channels, clip.n_samples, clip.sample_rate_hz, clip.label
            )
        )
        fh.write(np.ascontiguousarray(clip.samples, dtype="<f4").tobytes())


def read_clip(path: str | os.PathLike, clip_id: str | None = None) -> RawClip:
    """Read a ``.clip`` file; ``clip_id`` defaults to the file stem."""
    with open(path, "rb") as fh:
        head = fh.read(_CLIP_HEADER.size)
        if len(head) != _CLIP_HEADER.size:
            raise FormatError(f"{os.fspath(path)}: truncated clip header")
        magic, n_ch, n_samp, fs, label = _CLIP_HEADER.unpack(head)
        if magic != CLIP_MAGIC:
            raise FormatError(f"{os.fspath(path)}: bad clip magic {magic!r}")
        payload = fh.read()
    if len(payload) != 4 * n_ch * n_samp:
        raise FormatError(
            f"{os.fspath(path)}: expected {4 * n_ch * n_samp} sample bytes, got {len(payload)}"
        )
    samples = np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(n_ch, n_samp)
    if clip_id is None:
        clip_id = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return RawClip(samples, float(fs), int(label), clip_id)
