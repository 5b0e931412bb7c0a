"""Acoustic contamination audit: spectrogram cross-correlation, the mean
diagonal value statistic, and a circular-shift surrogate test."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .sigproc import HOP_S, WINDOW_S

CONTAM_BAND_HZ = (60.0, 200.0)
WINDOW_FRAMES = int(round(WINDOW_S / HOP_S))  # one analysis window, in frames


class ContaminationError(Exception):
    pass


@dataclass(frozen=True)
class ContaminationReport:
    block_id: str
    mdv: float
    p_value: float
    n_surrogates: int
    bonferroni_alpha: float = float("nan")
    contaminated: bool | None = None
    mdv_max: float | None = None  # worst channel, when aggregated over channels


def restrict_band(spec: np.ndarray, freqs: np.ndarray,
                  band: tuple[float, float] = CONTAM_BAND_HZ) -> np.ndarray:
    keep = (freqs >= band[0]) & (freqs <= band[1])
    return spec[keep]


def correlation_matrix(audio_spec: np.ndarray, neural_spec: np.ndarray) -> np.ndarray:
    """Pearson correlation of every audio row against every neural row.

    Constant rows get correlation 0 rather than NaN.
    """
    audio_spec = np.asarray(audio_spec, dtype=np.float64)
    neural_spec = np.asarray(neural_spec, dtype=np.float64)
    if audio_spec.shape[1] != neural_spec.shape[1]:
        raise ContaminationError("spectrograms must share the time axis")
    if audio_spec.shape[1] < 3:
        raise ContaminationError("need at least 3 time frames")

    def standardize(rows):
        centered = rows - rows.mean(axis=1, keepdims=True)
        norm = np.linalg.norm(centered, axis=1, keepdims=True)
        ok = norm[:, 0] > 0
        centered[ok] /= norm[ok]
        centered[~ok] = 0.0
        return centered

    return standardize(audio_spec) @ standardize(neural_spec).T


def mdv(matrix: np.ndarray) -> float:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ContaminationError(f"MDV needs a square matrix, got {matrix.shape}")
    return float(np.mean(np.diag(matrix)))


def surrogate_test(audio_spec: np.ndarray, neural_spec: np.ndarray,
                   n_surrogates: int, seed: int,
                   block_id: str = "") -> ContaminationReport:
    """Compare the observed MDV against circularly time-shifted surrogates.

    Each surrogate shifts the neural spectrogram by a uniform random offset
    of at least one window length; p = (1 + #{surrogate >= observed}) / (n + 1).
    """
    if n_surrogates < 1:
        raise ContaminationError("need at least one surrogate")
    audio_spec = np.asarray(audio_spec, dtype=np.float64)
    neural_spec = np.asarray(neural_spec, dtype=np.float64)
    t = audio_spec.shape[1]
    min_shift = WINDOW_FRAMES
    if t <= 2 * min_shift:
        raise ContaminationError(
            f"{t} frames too short for shifts of >= {min_shift} frames"
        )
    observed = mdv(correlation_matrix(audio_spec, neural_spec))
    rng = np.random.default_rng(seed)
    exceed = 0
    for _ in range(n_surrogates):
        shift = int(rng.integers(min_shift, t - min_shift + 1))
        surrogate = np.roll(neural_spec, shift, axis=1)
        if mdv(correlation_matrix(audio_spec, surrogate)) >= observed:
            exceed += 1
    p = (1 + exceed) / (n_surrogates + 1)
    return ContaminationReport(block_id=block_id, mdv=observed, p_value=p,
                               n_surrogates=n_surrogates)


def block_surrogate_test(audio_spec: np.ndarray, neural_specs: list[np.ndarray],
                         n_surrogates: int, seed: int,
                         block_id: str = "") -> ContaminationReport:
    """Multi-channel variant: the MDV is the mean over per-channel MDVs, and
    the worst (max) channel MDV is reported alongside."""
    if not neural_specs:
        raise ContaminationError("no neural channels")
    audio_spec = np.asarray(audio_spec, dtype=np.float64)
    t = audio_spec.shape[1]
    min_shift = WINDOW_FRAMES
    if t <= 2 * min_shift:
        raise ContaminationError(
            f"{t} frames too short for shifts of >= {min_shift} frames"
        )
    per_channel = np.array([
        mdv(correlation_matrix(audio_spec, ns)) for ns in neural_specs
    ])
    observed = float(per_channel.mean())
    rng = np.random.default_rng(seed)
    exceed = 0
    for _ in range(n_surrogates):
        shift = int(rng.integers(min_shift, t - min_shift + 1))
        surr = np.mean([
            mdv(correlation_matrix(audio_spec, np.roll(ns, shift, axis=1)))
            for ns in neural_specs
        ])
        if surr >= observed:
            exceed += 1
    p = (1 + exceed) / (n_surrogates + 1)
    return ContaminationReport(block_id=block_id, mdv=observed, p_value=p,
                               n_surrogates=n_surrogates,
                               mdv_max=float(per_channel.max()))


def bonferroni_report(reports: list[ContaminationReport],
                      alpha: float = 0.05) -> list[ContaminationReport]:
    """Flag each block contaminated iff p < alpha / n_blocks."""
    if not reports:
        raise ContaminationError("no reports to correct")
    threshold = alpha / len(reports)
    return [replace(r, bonferroni_alpha=threshold,
                    contaminated=r.p_value < threshold) for r in reports]


def format_table(reports: list[ContaminationReport]) -> str:
    """Plain-text table with columns Block, MDV, p."""
    lines = [f"{'Block':<14}{'MDV':>8}{'p':>10}  flag"]
    for r in reports:
        flag = "" if r.contaminated is None else ("CONTAMINATED" if r.contaminated else "ok")
        lines.append(f"{r.block_id:<14}{r.mdv:>8.3f}{r.p_value:>10.4g}  {flag}")
    return "\n".join(lines)
