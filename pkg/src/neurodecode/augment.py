"""Neural-variability augmentation: DTW-align audio repetitions of a
sentence and remap each neural trial onto a sibling repetition's timeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import MEL_CHANNELS


class AugmentError(Exception):
    pass


@dataclass(frozen=True)
class WarpPath:
    """Monotone alignment path from a source axis (I) to a target axis (J)."""
    pairs: tuple[tuple[int, int], ...]

    def validate(self, i_len: int, j_len: int) -> None:
        if not self.pairs:
            raise AugmentError("empty warp path")
        if self.pairs[0] != (0, 0) or self.pairs[-1] != (i_len - 1, j_len - 1):
            raise AugmentError(
                f"path endpoints {self.pairs[0]}..{self.pairs[-1]} inconsistent "
                f"with lengths ({i_len}, {j_len})"
            )
        for (i0, j0), (i1, j1) in zip(self.pairs, self.pairs[1:]):
            if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
                raise AugmentError(f"illegal step ({i0},{j0})->({i1},{j1})")


def dtw_align(x: np.ndarray, y: np.ndarray) -> tuple[WarpPath, float]:
    """Minimal-cost monotone alignment between (D, I) and (D, J) sequences
    under per-step Euclidean frame distance, by dynamic programming."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    i_len, j_len = x.shape[1], y.shape[1]
    if i_len < 1 or j_len < 1:
        raise AugmentError("sequences must be non-empty")
    # pairwise Euclidean frame distances
    sq = (x ** 2).sum(axis=0)[:, None] + (y ** 2).sum(axis=0)[None, :] - 2 * x.T @ y
    dist = np.sqrt(np.maximum(sq, 0.0))

    acc = np.full((i_len, j_len), np.inf)
    acc[0, 0] = dist[0, 0]
    for i in range(i_len):
        for j in range(j_len):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            if i > 0 and j > 0:
                best = min(best, acc[i - 1, j - 1])
            acc[i, j] = dist[i, j] + best

    pairs = [(i_len - 1, j_len - 1)]
    i, j = i_len - 1, j_len - 1
    while (i, j) != (0, 0):
        options = []
        if i > 0 and j > 0:
            options.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        if i > 0:
            options.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            options.append((acc[i, j - 1], (i, j - 1)))
        _, (i, j) = min(options, key=lambda o: o[0])
        pairs.append((i, j))
    pairs.reverse()
    path = WarpPath(tuple(pairs))
    path.validate(i_len, j_len)
    return path, float(acc[-1, -1])


def warp_neural(e_source: np.ndarray, path: WarpPath, j_len: int) -> np.ndarray:
    """Remap (E, 21, I) features onto the target timeline: each target frame
    is the mean of the source frames paired with it on the path."""
    e_source = np.asarray(e_source, dtype=np.float64)
    i_len = e_source.shape[-1]
    path.validate(i_len, j_len)
    out = np.zeros(e_source.shape[:-1] + (j_len,))
    counts = np.zeros(j_len)
    for i, j in path.pairs:
        out[..., j] += e_source[..., i]
        counts[j] += 1
    return out / counts


def augment_trials(trials: list, factor: int, seed: int,
                   features_of, target_of, make_augmented) -> list:
    """Generic augmentation driver over preprocessed trials.

    For each trial e_s^i, up to (factor - 1) sibling repetitions j != i are
    drawn (without replacement when enough siblings exist) and the neural
    features are DTW-warped onto a_s^j via the Mel channels.  Originals are
    kept; augmented entries come from `make_augmented(trial, donor, warped)`.
    """
    if factor < 1:
        raise AugmentError("factor must be >= 1")
    out = list(trials)
    if factor == 1:
        return out
    rng = np.random.default_rng(seed)
    by_sentence: dict[str, list] = {}
    for t in trials:
        by_sentence.setdefault(t.sentence_id, []).append(t)
    for sid in sorted(by_sentence):
        group = sorted(by_sentence[sid], key=lambda t: t.trial_id)
        if len(group) < 2:
            continue
        for trial in group:
            siblings = [t for t in group if t.trial_id != trial.trial_id]
            n_partners = factor - 1
            if len(siblings) >= n_partners:
                idx = rng.choice(len(siblings), size=n_partners, replace=False)
            else:
                idx = rng.choice(len(siblings), size=n_partners, replace=True)
            for k in idx:
                donor = siblings[int(k)]
                mel_src = np.asarray(target_of(trial))[MEL_CHANNELS]
                mel_dst = np.asarray(target_of(donor))[MEL_CHANNELS]
                path, _ = dtw_align(mel_src, mel_dst)
                warped = warp_neural(features_of(trial), path, mel_dst.shape[1])
                out.append(make_augmented(trial, donor, warped))
    return out
