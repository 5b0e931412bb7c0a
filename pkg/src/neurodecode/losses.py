"""Training objectives: masked MSE, the contrastive (CLIP-style) loss over
in-batch candidates, and their combination.

The printed form of the contrastive objective applies the softmax to raw
MSE distances, which *rewards* large positive-pair distances.  The default
`negated_distance` mode flips the sign before the softmax, giving standard
contrastive behavior; `literal` keeps the printed form for fidelity
experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class LossError(Exception):
    pass


def mse_loss(a_hat, a, valid_mask=None):
    """Mean squared error over valid frames, (1/(T*29)) * sum of squares.

    Accepts (C, T) arrays or Tensors; returns a Tensor when `a_hat` is one.
    """
    a = np.asarray(a, dtype=np.float64)
    if valid_mask is None:
        valid_mask = np.ones(a.shape[1], dtype=bool)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if not valid_mask.any():
        raise LossError("mse_loss: no valid frames")
    if isinstance(a_hat, Tensor):
        # masked_mse wants (..., T, C)
        return ad.masked_mse(ad.transpose(a_hat, (1, 0)), a.T, valid_mask)
    a_hat = np.asarray(a_hat, dtype=np.float64)
    diff = (a_hat - a)[:, valid_mask]
    return float(np.mean(diff ** 2))


def noisy_positive(a: np.ndarray, rng: np.random.Generator | None = None,
                   noise1: np.ndarray | None = None,
                   noise2: np.ndarray | None = None) -> np.ndarray:
    """Noisy positive: add standard-normal noise, then rescale the
    per-channel-centered signal by a second independent draw; centering
    keeps the per-channel temporal mean stable under the rescaling.
    """
    a = np.asarray(a, dtype=np.float64)
    if noise1 is None:
        noise1 = rng.standard_normal(a.shape)
    if noise2 is None:
        noise2 = rng.standard_normal(a.shape)
    noised = a + noise1
    mean = noised.mean(axis=1, keepdims=True)
    return (noised - mean) * noise2 + mean


@dataclass(frozen=True)
class ClipCandidate:
    values: np.ndarray  # (29, T)
    role: str  # "negative" | "positive_true" | "positive_noisy"
    sentence_id: str = ""


@dataclass
class ClipLossTrace:
    distances: list[np.ndarray] = field(default_factory=list)   # per-anchor v_mn rows
    log_softmax: list[np.ndarray] = field(default_factory=list)  # per-anchor rows
    per_anchor_loss: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "distances": [row.tolist() for row in self.distances],
            "log_softmax": [row.tolist() for row in self.log_softmax],
            "per_anchor_loss": self.per_anchor_loss,
        }


def build_candidates(sentence_ids: list[str], targets: list[np.ndarray],
                     anchor: int, rng: np.random.Generator) -> list[ClipCandidate]:
    """Candidate list for one anchor: negatives are batch targets from other
    sentences (repetitions of the anchor's sentence are excluded), followed
    by the true positive and the noisy positive."""
    if len(targets) < 1:
        raise LossError("empty batch")
    anchor_sentence = sentence_ids[anchor]
    candidates = [
        ClipCandidate(np.asarray(targets[n], dtype=np.float64), "negative", sentence_ids[n])
        for n in range(len(targets))
        if sentence_ids[n] != anchor_sentence
    ]
    a_m = np.asarray(targets[anchor], dtype=np.float64)
    candidates.append(ClipCandidate(a_m, "positive_true", anchor_sentence))
    candidates.append(ClipCandidate(noisy_positive(a_m, rng), "positive_noisy",
                                    anchor_sentence))
    return candidates


def clip_loss(projections: list[Tensor],
              candidate_sets: list[list[ClipCandidate]],
              valid_lengths: list[int] | None = None,
              mode: str = "negated_distance") -> tuple[Tensor, ClipLossTrace]:
    """Contrastive loss over a batch.

    projections: per-anchor (29, T_m) Tensors in acoustic space; each pair
    distance is the MSE over the common frame prefix.  The loss is
    -sum_m (logsoftmax row)[positive_true] + [positive_noisy].
    """
    if mode not in ("negated_distance", "literal"):
        raise LossError(f"unknown clip mode {mode!r}")
    if len(projections) != len(candidate_sets):
        raise LossError("one candidate set per anchor required")
    trace = ClipLossTrace()
    total = None
    for m, (proj, candidates) in enumerate(zip(projections, candidate_sets)):
        if not candidates:
            raise LossError(f"anchor {m} has no candidates")
        t_m = valid_lengths[m] if valid_lengths is not None else proj.shape[1]
        distances = []
        for cand in candidates:
            t_n = cand.values.shape[1]
            overlap = min(t_m, t_n)
            if overlap < 1:
                raise LossError("empty frame overlap between anchor and candidate")
            d = ad.reduce_mean((proj[:, :overlap] - Tensor(cand.values[:, :overlap])) ** 2)
            distances.append(ad.reshape(d, (1,)))
        v_row = ad.concat(distances, axis=0)
        logits = -v_row if mode == "negated_distance" else v_row
        log_probs = ad.log_softmax(logits, axis=0)
        pos = [i for i, c in enumerate(candidates) if c.role.startswith("positive")]
        anchor_loss = -ad.reduce_sum(log_probs[pos])
        trace.distances.append(v_row.data.copy())
        trace.log_softmax.append(log_probs.data.copy())
        trace.per_anchor_loss.append(anchor_loss.item())
        total = anchor_loss if total is None else total + anchor_loss
    return total, trace


def retrieval_accuracy(trace: ClipLossTrace,
                       candidate_sets: list[list[ClipCandidate]]) -> float:
    """Fraction of anchors whose true positive has the highest probability."""
    hits = 0
    for row, candidates in zip(trace.log_softmax, candidate_sets):
        true_idx = next(i for i, c in enumerate(candidates) if c.role == "positive_true")
        noisy_idx = next(i for i, c in enumerate(candidates) if c.role == "positive_noisy")
        if int(np.argmax(row)) in (true_idx, noisy_idx):
            hits += 1
    return hits / len(candidate_sets)


def combined_loss(mse: Tensor, clip: Tensor | None) -> Tensor:
    """Total objective: MSE plus (optionally) the contrastive term."""
    if clip is None:
        return mse
    return mse + clip
