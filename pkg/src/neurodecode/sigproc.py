"""Raw multi-channel signals -> 21 features per electrode at 100 Hz.

Features 0..19 are mean power spectral density in 10-Hz bands covering
0-200 Hz (200-ms Hamming windows, 10-ms hop); feature 20 is the 0.5-5 Hz
low-frequency component sampled at the frame centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .corpus import GridGeometry

WINDOW_S = 0.2
HOP_S = 0.01
N_BANDS = 20
BAND_WIDTH_HZ = 10.0
N_FEATURES = 21
LFP_BAND_HZ = (0.5, 5.0)


class SigprocError(Exception):
    pass


def frame_count(samples: int, fs: float) -> int:
    window = int(round(WINDOW_S * fs))
    hop = int(round(HOP_S * fs))
    if samples < window:
        raise SigprocError(f"signal of {samples} samples shorter than one window ({window})")
    return (samples - window) // hop + 1


def common_average_reference(raw: np.ndarray) -> np.ndarray:
    """Subtract the across-channel mean at every sample."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 1:
        raise SigprocError("expected (channels, samples) with >= 1 channel")
    return raw - raw.mean(axis=0, keepdims=True)


def band_features(raw_channel: np.ndarray, fs: float) -> np.ndarray:
    """Per-frame PSD averaged in 10-Hz bands, (20, T).

    Bin assignment is by bin center frequency, half-open [10b, 10(b+1)).
    """
    if fs < 2 * N_BANDS * BAND_WIDTH_HZ:
        raise SigprocError(f"fs={fs} below Nyquist requirement for the 200 Hz top band")
    x = np.asarray(raw_channel, dtype=np.float64)
    window = int(round(WINDOW_S * fs))
    hop = int(round(HOP_S * fs))
    n_frames = frame_count(x.size, fs)
    ham = np.hamming(window)
    idx = hop * np.arange(n_frames)[:, None] + np.arange(window)[None, :]
    frames = x[idx] * ham[None, :]
    psd = np.abs(np.fft.rfft(frames, axis=1)) ** 2  # (T, bins)
    freqs = np.fft.rfftfreq(window, d=1.0 / fs)
    out = np.zeros((N_BANDS, n_frames))
    for b in range(N_BANDS):
        in_band = (freqs >= b * BAND_WIDTH_HZ) & (freqs < (b + 1) * BAND_WIDTH_HZ)
        if not in_band.any():
            raise SigprocError(f"no FFT bins fall in band {b}")
        out[b] = psd[:, in_band].mean(axis=1)
    return out


def lfp_feature(raw_channel: np.ndarray, fs: float) -> np.ndarray:
    """Zero-phase 0.5-5 Hz band-pass sampled at the frame centers, (1, T)."""
    if fs <= 10.0:
        raise SigprocError(f"fs={fs} too low for the 0.5-5 Hz band")
    x = np.asarray(raw_channel, dtype=np.float64)
    window = int(round(WINDOW_S * fs))
    hop = int(round(HOP_S * fs))
    n_frames = frame_count(x.size, fs)
    sos = sps.butter(4, LFP_BAND_HZ, btype="bandpass", fs=fs, output="sos")
    filtered = sps.sosfiltfilt(sos, x, padtype="even")
    centers = window // 2 + hop * np.arange(n_frames)
    return filtered[centers][None, :]


def spectrogram(raw_channel: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """Hamming STFT magnitude spectrogram on the same frame grid, (bins, T)."""
    x = np.asarray(raw_channel, dtype=np.float64)
    window = int(round(WINDOW_S * fs))
    hop = int(round(HOP_S * fs))
    n_frames = frame_count(x.size, fs)
    ham = np.hamming(window)
    idx = hop * np.arange(n_frames)[:, None] + np.arange(window)[None, :]
    spec = np.abs(np.fft.rfft(x[idx] * ham[None, :], axis=1)).T
    freqs = np.fft.rfftfreq(window, d=1.0 / fs)
    return spec, freqs


def assemble_features(raw: np.ndarray, fs: float, grid: GridGeometry) -> np.ndarray:
    """CAR, then per-channel band features and LFP, stacked (channels, 21, T)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[0] != grid.n_channels:
        raise SigprocError(
            f"{raw.shape[0]} channels but grid is {grid.n_x}x{grid.n_y}"
        )
    car = common_average_reference(raw)
    per_channel = []
    for c in range(car.shape[0]):
        bands = band_features(car[c], fs)
        lfp = lfp_feature(car[c], fs)
        per_channel.append(np.concatenate([bands, lfp], axis=0))
    return np.stack(per_channel, axis=0)


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray  # (channels, 21)
    std: np.ndarray   # (channels, 21), floored at 1e-8


def fit_stats(tensors: list[np.ndarray]) -> FeatureStats:
    """Per (electrode, feature) mean/std over frames of the training split."""
    if not tensors:
        raise SigprocError("cannot fit statistics on an empty training set")
    stacked = np.concatenate([np.asarray(t, dtype=np.float64) for t in tensors], axis=2)
    mean = stacked.mean(axis=2)
    std = np.maximum(stacked.std(axis=2), 1e-8)
    return FeatureStats(mean=mean, std=std)


def apply_zscore(tensor: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return (np.asarray(tensor, dtype=np.float64) - stats.mean[:, :, None]) / stats.std[:, :, None]
