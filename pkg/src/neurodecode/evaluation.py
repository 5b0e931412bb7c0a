"""Decoding metrics (PCC, MCD, vowel classification / F1), exact rank
tests, and SmoothGrad saliency maps."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .augment import dtw_align
from .corpus import AP_CHANNELS, F0_CHANNEL, MEL_CHANNELS

MCD_CONST = (10.0 / math.log(10.0)) * math.sqrt(2.0)


class EvaluationError(Exception):
    pass


# ---------------------------------------------------------------------------
# Correlation and distortion
# ---------------------------------------------------------------------------

def pcc(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; constant inputs yield 0 by convention."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise EvaluationError("pcc needs two equal-length series of >= 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.linalg.norm(xc) * np.linalg.norm(yc)
    if denom == 0:
        return 0.0
    return float(np.clip(xc @ yc / denom, -1.0, 1.0))


CHANNEL_GROUPS = {
    "all": list(range(29)),
    "mel": list(range(25)),
    "ap": [25, 26],
    "f0": [F0_CHANNEL],
}


def sentence_pcc(a_hat: np.ndarray, a: np.ndarray, group: str = "all",
                 valid_mask: np.ndarray | None = None) -> float:
    """Per-channel PCC over valid frames, averaged over the channel group."""
    a_hat = np.asarray(a_hat, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if group not in CHANNEL_GROUPS:
        raise EvaluationError(f"unknown channel group {group!r}")
    if valid_mask is not None:
        a_hat = a_hat[:, np.asarray(valid_mask, dtype=bool)]
        a = a[:, np.asarray(valid_mask, dtype=bool)]
    channels = CHANNEL_GROUPS[group]
    return float(np.mean([pcc(a_hat[c], a[c]) for c in channels]))


def mcd(mel_hat: np.ndarray, mel: np.ndarray) -> float:
    """Frame-averaged Mel-cepstral distortion in dB over all 25 coefficients."""
    mel_hat = np.asarray(mel_hat, dtype=np.float64)
    mel = np.asarray(mel, dtype=np.float64)
    if mel_hat.shape != mel.shape or mel_hat.shape[0] != 25:
        raise EvaluationError(f"mcd expects matching (25, T), got {mel_hat.shape}")
    per_frame = np.sqrt(((mel_hat - mel) ** 2).sum(axis=0))
    return float(MCD_CONST * per_frame.mean())


def _dtw_mcd(segment: np.ndarray, template: np.ndarray) -> float:
    """MCD between unequal-length Mel segments, averaged along the DTW path."""
    path, _ = dtw_align(segment, template)
    dists = [np.linalg.norm(segment[:, i] - template[:, j]) for i, j in path.pairs]
    return float(MCD_CONST * np.mean(dists))


def classify_vowel(decoded_segment: np.ndarray,
                   templates: list[tuple[str, np.ndarray]]) -> str:
    """Label of the template with the least (DTW-aligned) MCD distance."""
    if not templates:
        raise EvaluationError("no vowel templates")
    decoded_segment = np.asarray(decoded_segment, dtype=np.float64)
    best_label, best_score = None, np.inf
    for label, tpl in templates:
        tpl = np.asarray(tpl, dtype=np.float64)
        if tpl.shape[1] == decoded_segment.shape[1]:
            score = mcd(decoded_segment, tpl)
        else:
            score = _dtw_mcd(decoded_segment, tpl)
        if score < best_score:
            best_label, best_score = label, score
    return best_label


# ---------------------------------------------------------------------------
# Confusion matrices and F1
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray  # rows = true, columns = predicted

    @classmethod
    def empty(cls, classes) -> "ConfusionMatrix":
        classes = tuple(classes)
        return cls(classes, np.zeros((len(classes), len(classes)), dtype=int))

    def add(self, true_label: str, predicted_label: str) -> None:
        self.counts[self.classes.index(true_label),
                    self.classes.index(predicted_label)] += 1


def f1_scores(cm: ConfusionMatrix) -> tuple[dict[str, float], float]:
    """Per-class F1 = TP / (TP + (FP + FN)/2) and the macro average over
    classes with at least one true instance."""
    per_class = {}
    macro_terms = []
    for k, label in enumerate(cm.classes):
        tp = cm.counts[k, k]
        fp = cm.counts[:, k].sum() - tp
        fn = cm.counts[k, :].sum() - tp
        denom = tp + 0.5 * (fp + fn)
        f1 = float(tp / denom) if denom > 0 else 0.0
        per_class[label] = f1
        if cm.counts[k, :].sum() > 0:
            macro_terms.append(f1)
    macro = float(np.mean(macro_terms)) if macro_terms else 0.0
    return per_class, macro


# ---------------------------------------------------------------------------
# Rank tests
# ---------------------------------------------------------------------------

def _signed_rank_distribution(ranks2: np.ndarray) -> dict[int, int]:
    """Counts of 2*W+ over all sign assignments; ranks2 are 2x average ranks."""
    dist = {0: 1}
    for r in ranks2:
        new: dict[int, int] = {}
        for value, count in dist.items():
            new[value] = new.get(value, 0) + count
            new[value + int(r)] = new.get(value + int(r), 0) + count
        dist = new
    return dist


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j < values.size and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0  # average of 1-based ranks i+1..j
        i = j
    return ranks


def wilcoxon_signed_rank(x, y) -> float:
    """Two-sided paired test; exact for n <= 25, else normal approximation
    with tie correction.  Zero differences are dropped; if every difference
    is zero the samples are indistinguishable and p = 1."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise EvaluationError("paired samples must have equal length")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = n * (n + 1) / 2
    if n <= 25:
        ranks2 = np.round(2 * ranks).astype(int)
        dist = _signed_rank_distribution(ranks2)
        w2 = round(2 * w_plus)
        center = total  # = 2 * total/2
        target = abs(w2 - center)
        hits = sum(c for v, c in dist.items() if abs(v - center) >= target - 1e-9)
        return min(1.0, hits / 2 ** n)
    mean = total / 2
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = ((tie_counts ** 3 - tie_counts) / 2).sum()
    var = (n * (n + 1) * (2 * n + 1) - tie_term) / 24
    z = (w_plus - mean) / math.sqrt(var)
    return min(1.0, 2 * (1 - _norm_cdf(abs(z))))


def mann_whitney_u(x, y) -> float:
    """Two-sided rank-sum test; exact by enumeration for n + m <= 16,
    else normal approximation with tie correction."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = x.size, y.size
    if n == 0 or m == 0:
        raise EvaluationError("both samples must be non-empty")
    pooled = np.concatenate([x, y])
    ranks = _average_ranks(pooled)
    u_obs = float(ranks[:n].sum()) - n * (n + 1) / 2
    center = n * m / 2
    if n + m <= 16:
        target = abs(u_obs - center)
        hits = 0
        total = 0
        for combo in itertools.combinations(range(n + m), n):
            u = float(ranks[list(combo)].sum()) - n * (n + 1) / 2
            total += 1
            if abs(u - center) >= target - 1e-9:
                hits += 1
        return hits / total
    _, tie_counts = np.unique(ranks, return_counts=True)
    big_n = n + m
    tie_term = ((tie_counts ** 3 - tie_counts)).sum()
    var = n * m / 12 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    if var == 0:
        return 1.0
    z = (u_obs - center) / math.sqrt(var)
    return min(1.0, 2 * (1 - _norm_cdf(abs(z))))


def _norm_cdf(z: float) -> float:
    return 0.5 * (1 + math.erf(z / math.sqrt(2)))


# ---------------------------------------------------------------------------
# Saliency
# ---------------------------------------------------------------------------

@dataclass
class SaliencyMap:
    values: np.ndarray  # (E, 21, T)
    n_samples: int = 1
    sigma: float = 0.0


def saliency_raw(loss_of_input, e: np.ndarray) -> SaliencyMap:
    """Gradient of the decoding loss with respect to the input features.

    `loss_of_input` maps an input Tensor shaped like `e` to a scalar Tensor.
    """
    x = Tensor(np.asarray(e, dtype=np.float64), requires_grad=True)
    loss = loss_of_input(x)
    loss.backward()
    return SaliencyMap(values=x.grad.copy())


def smoothgrad(loss_of_input, e: np.ndarray, n: int = 50, sigma: float = 0.15,
               seed: int = 0) -> SaliencyMap:
    """Average raw saliency over n noise-perturbed copies of the input;
    the noise scale is sigma / (max(e) - min(e))."""
    e = np.asarray(e, dtype=np.float64)
    span = float(e.max() - e.min())
    if span == 0:
        raise EvaluationError("smoothgrad: input is constant, noise scale undefined")
    if n < 1:
        raise EvaluationError("smoothgrad needs n >= 1")
    sigma_hat = sigma / span
    rng = np.random.default_rng(seed)
    acc = np.zeros_like(e)
    for _ in range(n):
        noisy = e + rng.normal(0.0, sigma_hat, size=e.shape)
        acc += saliency_raw(loss_of_input, noisy).values
    return SaliencyMap(values=acc / n, n_samples=n, sigma=sigma)


def aggregate_saliency(s_map: SaliencyMap, axis: str,
                       grid_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Mean absolute saliency per electrode (reshaped to the grid when its
    shape is given) or per feature."""
    mags = np.abs(s_map.values)
    if axis == "electrode":
        agg = mags.mean(axis=(1, 2))
        if grid_shape is not None:
            agg = agg.reshape(grid_shape)
        return agg
    if axis == "feature":
        return mags.mean(axis=(0, 2))
    raise EvaluationError(f"unknown aggregation axis {axis!r}")
