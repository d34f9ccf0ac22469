"""Synthetic EEG-like clips with a controllable preictal band-power excess.

Interictal clips are white Gaussian noise. Preictal clips are the same kind
of noise plus an independent component low-passed to ``band_hz`` and scaled
so that the in-band power is ``gain`` times the interictal in-band power.
``gain = 1`` therefore makes the two classes identically distributed, which
is the null control for the end-to-end experiment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import DTYPE
from .wavelet import RawClip


@dataclass(frozen=True)
class SynthConfig:
    n_clips: int = 32  # per class
    clip_seconds: float = 600.0
    sample_rate_hz: float = 400.0
    n_channels: int = 4
    gain: float = 2.0
    band_hz: float = 50.0
    noise_level: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_clips < 1:
            raise ValueError(f"need at least one clip per class, got {self.n_clips}")
        if self.clip_seconds <= 0 or self.sample_rate_hz <= 0 or self.n_channels < 1:
            raise ValueError("clip length, sample rate and channel count must be positive")
        if self.gain < 1:
            raise ValueError(f"gain is a power ratio and must be >= 1, got {self.gain}")
        if not 0 < self.band_hz < self.sample_rate_hz / 2:
            raise ValueError(f"band edge {self.band_hz} Hz must lie below Nyquist")
        if self.noise_level <= 0:
            raise ValueError("noise_level must be positive")

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate_hz))


def clip_name(label: int, index: int) -> str:
    return f"{'preictal' if label else 'interictal'}_{index:04d}"


def lowpass_noise(rng: np.random.Generator, shape: tuple[int, int], fs: float, band_hz: float) -> np.ndarray:
    """White noise with every spectral bin above ``band_hz`` zeroed.

    In-band power spectral density equals that of the unfiltered noise.
    """
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(shape[-1], d=1.0 / fs)
    spec[:, freqs > band_hz] = 0.0
    return np.fft.irfft(spec, n=shape[-1], axis=-1)


def make_clip(cfg: SynthConfig, label: int, index: int) -> RawClip:
    """One clip; its content depends only on (seed, label, index)."""
    rng = np.random.default_rng([cfg.seed, label, index])
    shape = (cfg.n_channels, cfg.n_samples)
    x = rng.standard_normal(shape)
    if label == 1 and cfg.gain > 1:
        x += np.sqrt(cfg.gain - 1.0) * lowpass_noise(rng, shape, cfg.sample_rate_hz, cfg.band_hz)
    return RawClip((cfg.noise_level * x).astype(DTYPE), cfg.sample_rate_hz, label, clip_name(label, index))


def iter_synthetic_dataset(cfg: SynthConfig) -> Iterator[RawClip]:
    """Balanced clips, alternating interictal / preictal."""
    cfg.validate()
    for i in range(cfg.n_clips):
        for label in (0, 1):
            yield make_clip(cfg, label, i)


def gen_synthetic_dataset(cfg: SynthConfig) -> list[RawClip]:
    return list(iter_synthetic_dataset(cfg))
