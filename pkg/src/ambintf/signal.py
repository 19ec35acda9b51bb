"""Multichannel audio containers, STFT/ISTFT, magnitude compression and
empirical covariance fields.

The STFT uses a centered sqrt-Hann analysis window; the ISTFT applies the
matching sqrt-Hann synthesis window with overlap-add and window-envelope
normalization, giving exact interior reconstruction for any hop that keeps
the squared-window overlap positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.io import wavfile

N3D = "N3D"
SN3D = "SN3D"

EU_COMPRESSED = "EU_compressed"
IS_POWER = "IS_power"


@dataclass
class MultichannelAudio:
    """Time-domain multichannel signal, channels-first.

    ``samples`` has shape (channels, frames); ``normalization`` records the
    Ambisonic channel scaling ('N3D' or 'SN3D').
    """

    samples: np.ndarray
    rate: int
    normalization: str = N3D

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.rate <= 0:
            raise ValueError("sample rate must be positive")
        if self.normalization not in (N3D, SN3D):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class SpectroTensor:
    """Complex time-frequency field, shape (F, T, L)."""

    bins: np.ndarray
    rate: int
    fft_size: int
    hop: int
    n_samples: int
    normalization: str = N3D

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=complex)
        if self.bins.ndim != 3:
            raise ValueError("bins must have shape (F, T, L)")
        if self.bins.shape[0] != self.fft_size // 2 + 1:
            raise ValueError("F must equal fft_size//2 + 1")
        if not np.all(np.isfinite(self.bins)):
            raise ValueError("non-finite spectrogram values")

    @property
    def shape(self):
        return self.bins.shape


@dataclass
class CovarianceField:
    """Per-bin L x L Hermitian covariance matrices, shape (F, T, L, L)."""

    mats: np.ndarray
    kind: str

    def __post_init__(self):
        self.mats = np.asarray(self.mats, dtype=complex)
        if self.mats.ndim != 4 or self.mats.shape[-1] != self.mats.shape[-2]:
            raise ValueError("mats must have shape (F, T, L, L)")
        if self.kind not in (EU_COMPRESSED, IS_POWER):
            raise ValueError(f"unknown covariance kind {self.kind!r}")

    @property
    def n_channels(self):
        return self.mats.shape[-1]


def sn3d_to_n3d_gains(n_channels: int) -> np.ndarray:
    """Per-channel gain converting SN3D-scaled signals to N3D."""
    order = int(round(math.sqrt(n_channels))) - 1
    if (order + 1) ** 2 != n_channels:
        raise ValueError(f"{n_channels} channels is not a full SH set")
    gains = np.empty(n_channels)
    for n in range(order + 1):
        gains[n * n:(n + 1) ** 2] = math.sqrt(2 * n + 1)
    return gains


def to_n3d(audio: MultichannelAudio) -> MultichannelAudio:
    """Convert an SN3D-tagged signal to N3D (no-op if already N3D)."""
    if audio.normalization == N3D:
        return audio
    gains = sn3d_to_n3d_gains(audio.n_channels)
    return MultichannelAudio(audio.samples * gains[:, None], audio.rate, N3D)


def _sqrt_hann(fft_size: int) -> np.ndarray:
    # periodic Hann, so that the squared window satisfies COLA at fft/2 hop
    n = np.arange(fft_size)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / fft_size))


def stft(audio: MultichannelAudio, fft_size: int = 2048,
         hop: int | None = None) -> SpectroTensor:
    """Centered multichannel STFT with a sqrt-Hann analysis window."""
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise ValueError("fft_size must be a power of two")
    hop = fft_size // 2 if hop is None else hop
    if not 0 < hop <= fft_size:
        raise ValueError("hop must satisfy 0 < hop <= fft_size")
    x = audio.samples
    if x.size == 0:
        raise ValueError("empty input signal")
    pad = fft_size // 2
    xp = np.pad(x, ((0, 0), (pad, pad)))
    n_frames = 1 + (xp.shape[1] - fft_size) // hop
    window = _sqrt_hann(fft_size)
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[:, idx] * window  # (L, T, fft)
    spec = np.fft.rfft(frames, axis=-1)  # (L, T, F)
    bins = np.moveaxis(spec, (2, 1, 0), (0, 1, 2))
    return SpectroTensor(bins=bins, rate=audio.rate, fft_size=fft_size,
                         hop=hop, n_samples=audio.n_samples,
                         normalization=audio.normalization)


def istft(spec: SpectroTensor) -> MultichannelAudio:
    """Inverse STFT by sqrt-Hann windowed overlap-add."""
    f, t, n_ch = spec.bins.shape
    if f != spec.fft_size // 2 + 1:
        raise ValueError("spectrogram metadata inconsistent with bin count")
    window = _sqrt_hann(spec.fft_size)
    frames = np.fft.irfft(np.moveaxis(spec.bins, (0, 1, 2), (2, 1, 0)),
                          n=spec.fft_size, axis=-1)  # (L, T, fft)
    frames *= window
    total = spec.fft_size + spec.hop * (t - 1)
    out = np.zeros((n_ch, total))
    envelope = np.zeros(total)
    for i in range(t):
        sl = slice(i * spec.hop, i * spec.hop + spec.fft_size)
        out[:, sl] += frames[:, i, :]
        envelope[sl] += window ** 2
    nz = envelope > 1e-12
    out[:, nz] /= envelope[nz]
    pad = spec.fft_size // 2
    out = out[:, pad:pad + spec.n_samples]
    return MultichannelAudio(out, spec.rate, spec.normalization)


def compress_magnitude(spec: SpectroTensor) -> SpectroTensor:
    """Square-root magnitude compression preserving phase; zeros stay zero."""
    mag = np.abs(spec.bins)
    scale = np.zeros_like(mag)
    nz = mag > 0
    scale[nz] = mag[nz] ** -0.5
    return replace(spec, bins=spec.bins * scale)


def empirical_covariance(spec: SpectroTensor, kind: str) -> CovarianceField:
    """Per-bin rank-1 outer products v v^H of the spectrogram vectors."""
    v = spec.bins  # (F, T, L)
    mats = v[..., :, None] * np.conj(v[..., None, :])
    return CovarianceField(mats=mats, kind=kind)


def load_wav(path, normalization: str = N3D,
             convert_to_n3d: bool = True) -> MultichannelAudio:
    """Read a multichannel WAV (PCM16 or float32) as channels-first float."""
    rate, data = wavfile.read(path)
    if data.ndim == 1:
        data = data[:, None]
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(float) / 32768.0  # PCM16 to [-1, 1)
    else:
        data = data.astype(float)
    audio = MultichannelAudio(data.T, int(rate), normalization)
    if convert_to_n3d:
        audio = to_n3d(audio)
    return audio


def save_wav(path, audio: MultichannelAudio, dtype: str = "float32"):
    """Write channels-first audio as WAV; dtype 'float32' or 'pcm16'."""
    data = audio.samples.T
    if dtype == "float32":
        wavfile.write(path, audio.rate, data.astype(np.float32))
    elif dtype == "pcm16":
        clipped = np.clip(data, -1.0, 1.0 - 1.0 / 32768)
        wavfile.write(path, audio.rate, (clipped * 32768.0).astype(np.int16))
    else:
        raise ValueError(f"unsupported WAV dtype {dtype!r}")
