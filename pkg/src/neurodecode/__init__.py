"""Offline pipeline for regressing acoustic speech features from
grid-electrode neural recordings.

The package covers signal preprocessing, encoder-decoder models trained
with a joint regression + contrastive objective, time-warp augmentation,
cross-validated evaluation, transfer learning, saliency analysis and an
acoustic contamination audit, all on a from-scratch autodiff engine.
"""

from .autodiff import Adam, Tensor, grad_check, precision
from .corpus import (ACOUSTIC_DIM, Corpus, CorpusError, FoldAssignment,
                     GridGeometry, SynthConfig, Trial, VowelInterval,
                     generate_synthetic_corpus, load_corpus, make_folds,
                     write_corpus)
from .evaluation import (ConfusionMatrix, classify_vowel, f1_scores,
                         mann_whitney_u, mcd, pcc, sentence_pcc, smoothgrad,
                         wilcoxon_signed_rank)
from .models import SpeechDecoder, transfer_init
from .training import (TrainConfig, TrainResult, preprocess_corpus, run_cv,
                       run_transfer, shuffled_target_baseline, train_model)

__version__ = "0.1.0"

__all__ = [
    "ACOUSTIC_DIM", "Adam", "ConfusionMatrix", "Corpus", "CorpusError",
    "FoldAssignment", "GridGeometry", "SpeechDecoder", "SynthConfig",
    "Tensor", "TrainConfig", "TrainResult", "Trial", "VowelInterval",
    "classify_vowel", "f1_scores", "generate_synthetic_corpus", "grad_check",
    "load_corpus", "make_folds", "mann_whitney_u", "mcd", "pcc", "precision",
    "preprocess_corpus", "run_cv", "run_transfer", "sentence_pcc",
    "shuffled_target_baseline", "smoothgrad", "train_model", "transfer_init",
    "wilcoxon_signed_rank", "write_corpus",
]
