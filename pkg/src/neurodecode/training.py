"""Batching, the joint MSE+CLIP training loop, early stopping on validation
MCD, cross-validation, transfer learning and the shuffled-target baseline."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam
from .augment import augment_trials
from .corpus import MEL_CHANNELS, Corpus, FoldAssignment, GridGeometry, make_folds
from .evaluation import (ConfusionMatrix, classify_vowel, f1_scores, mcd,
                         sentence_pcc)
from .losses import build_candidates, clip_loss, retrieval_accuracy
from .models import SpeechDecoder, transfer_init
from .sigproc import FeatureStats, apply_zscore, assemble_features, fit_stats
from .tensorfile import read_tensor, write_tensor


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    encoder_variant: str = "vit"  # "vit" | "cnn"
    use_clip: bool = False
    clip_mode: str = "negated_distance"
    use_augmentation: bool = False
    augmentation_factor: int = 4
    batch_size: int = 16
    lr: float = 4e-4
    patience: int = 20
    max_epochs: int = 500
    seed: int = 0
    cnn_kernel: int = 2
    n_folds: int = 10
    ratios: tuple[float, float, float] = (0.72, 0.18, 0.10)
    group_by_sentence: bool = False
    stop_below_mcd: float | None = None  # optional hard stop for memorization runs
    head_dropout: float = 0.5  # 0.0 disables regularization for capacity checks
    lr_decay: float = 1.0  # per-epoch multiplicative learning-rate factor

    def __post_init__(self):
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if not 0.0 <= self.head_dropout < 1.0:
            raise TrainingError("head_dropout must be in [0, 1)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise TrainingError("lr_decay must be in (0, 1]")
        if self.use_clip and self.batch_size < 2:
            raise TrainingError("CLIP training needs batch_size >= 2 for negatives")
        if self.encoder_variant not in ("vit", "cnn"):
            raise TrainingError(f"unknown encoder {self.encoder_variant!r}")

    def label(self, transfer: bool = False) -> str:
        name = {"vit": "ViT", "cnn": "CNN"}[self.encoder_variant]
        if self.use_clip:
            name += "+CLIP"
        if self.use_augmentation:
            name += "+Aug"
        if transfer:
            name += "+TL"
        return name


@dataclass
class PreparedTrial:
    trial_id: str
    sentence_id: str
    repetition_index: int
    features: np.ndarray  # (E, 21, T)
    target: np.ndarray    # (29, T) raw acoustic features
    vowel_intervals: tuple
    block_id: str
    is_augmented: bool = False
    source_trial: str | None = None
    audio_donor_trial: str | None = None

    @property
    def n_frames(self) -> int:
        return self.features.shape[2]


def preprocess_corpus(corpus: Corpus, cache_dir: str | Path | None = None
                      ) -> list[PreparedTrial]:
    """Extract 21-feature tensors for every trial, aligned to the acoustic
    frame grid (both truncated to the shorter length)."""
    cache_dir = Path(cache_dir) if cache_dir is not None else None
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
    prepared = []
    for t in corpus.trials:
        cache_file = cache_dir / f"{t.trial_id}.feat" if cache_dir else None
        if cache_file is not None and cache_file.exists():
            feats = read_tensor(cache_file).astype(np.float64)
        else:
            feats = assemble_features(t.raw_neural, corpus.sample_rate_neural,
                                      corpus.grid)
            if cache_file is not None:
                write_tensor(cache_file, feats)
        t_len = min(feats.shape[2], t.raw_audio_features.shape[1])
        ivs = tuple(iv for iv in t.vowel_intervals if iv.end_frame <= t_len)
        prepared.append(PreparedTrial(
            trial_id=t.trial_id,
            sentence_id=t.sentence_id,
            repetition_index=t.repetition_index,
            features=feats[:, :, :t_len],
            target=t.raw_audio_features[:, :t_len].astype(np.float64),
            vowel_intervals=ivs,
            block_id=t.block_id,
        ))
    return prepared


def select_trials(prepared: list[PreparedTrial], ids) -> list[PreparedTrial]:
    wanted = set(ids)
    return [t for t in prepared if t.trial_id in wanted]


def augment_prepared(trials: list[PreparedTrial], factor: int,
                     seed: int) -> list[PreparedTrial]:
    """Originals plus DTW-warped sibling remappings, flagged as augmented."""
    counter = [0]

    def make_augmented(trial: PreparedTrial, donor: PreparedTrial,
                       warped: np.ndarray) -> PreparedTrial:
        counter[0] += 1
        return PreparedTrial(
            trial_id=f"{trial.trial_id}~aug{counter[0]:04d}",
            sentence_id=trial.sentence_id,
            repetition_index=trial.repetition_index,
            features=warped,
            target=donor.target.copy(),
            vowel_intervals=donor.vowel_intervals,
            block_id=trial.block_id,
            is_augmented=True,
            source_trial=trial.trial_id,
            audio_donor_trial=donor.trial_id,
        )

    return augment_trials(trials, factor, seed,
                          features_of=lambda t: t.features,
                          target_of=lambda t: t.target,
                          make_augmented=make_augmented)


@dataclass(frozen=True)
class TargetNorm:
    mean: np.ndarray  # (29,)
    std: np.ndarray   # (29,)

    @classmethod
    def fit(cls, trials: list[PreparedTrial]) -> "TargetNorm":
        stacked = np.concatenate([t.target for t in trials], axis=1)
        return cls(stacked.mean(axis=1), np.maximum(stacked.std(axis=1), 1e-8))

    def apply(self, target: np.ndarray) -> np.ndarray:
        return (target - self.mean[:, None]) / self.std[:, None]

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        return normalized * self.std[:, None] + self.mean[:, None]


def pad_batch(features: list[np.ndarray], targets: list[np.ndarray]
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-pad to the batch maximum length; masks mark valid frames.

    Returns features (B, E, 21, Tmax), targets (B, Tmax, 29), mask (B, Tmax).
    """
    if not features:
        raise TrainingError("empty batch")
    t_max = max(f.shape[-1] for f in features)
    b = len(features)
    e, nf, _ = features[0].shape
    feat = np.zeros((b, e, nf, t_max))
    targ = np.zeros((b, t_max, targets[0].shape[0]))
    mask = np.zeros((b, t_max), dtype=bool)
    for k, (f, a) in enumerate(zip(features, targets)):
        t_len = f.shape[-1]
        feat[k, :, :, :t_len] = f
        targ[k, :t_len] = a.T
        mask[k, :t_len] = True
    return feat, targ, mask


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopState:
    patience: int
    best_val_mcd: float = np.inf
    counter: int = 0
    best_params: dict | None = None


def early_stop_update(state: EarlyStopState, val_mcd: float,
                      snapshot_fn=None) -> bool:
    """Strict improvement resets the counter and saves a checkpoint;
    otherwise the counter increments.  Returns True while training should
    continue."""
    if not np.isfinite(val_mcd):
        raise TrainingError(f"non-finite validation MCD {val_mcd}")
    if val_mcd < state.best_val_mcd:
        state.best_val_mcd = val_mcd
        state.counter = 0
        if snapshot_fn is not None:
            state.best_params = snapshot_fn()
    else:
        state.counter += 1
    return state.counter < state.patience


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    train_clip: float
    val_mcd: float
    train_mcd: float = np.nan
    clip_retrieval: float = np.nan


@dataclass
class TrainResult:
    model: SpeechDecoder
    history: list[EpochRecord]
    stats: FeatureStats
    target_norm: TargetNorm
    best_val_mcd: float
    config: TrainConfig


def history_to_csv(history: list[EpochRecord]) -> str:
    lines = ["epoch,train_mse,train_clip,val_mcd"]
    for rec in history:
        lines.append(f"{rec.epoch},{rec.train_mse:.8g},{rec.train_clip:.8g},"
                     f"{rec.val_mcd:.8g}")
    return "\n".join(lines) + "\n"


def _decode_batches(model: SpeechDecoder, trials: list[PreparedTrial],
                    stats: FeatureStats, target_norm: TargetNorm,
                    batch_size: int) -> dict[str, np.ndarray]:
    """Eval-mode decoding; returns raw-domain (29, T) outputs per trial."""
    outputs: dict[str, np.ndarray] = {}
    for lo in range(0, len(trials), batch_size):
        chunk = trials[lo:lo + batch_size]
        feats = [apply_zscore(t.features, stats) for t in chunk]
        targets = [t.target for t in chunk]
        feat, _, mask = pad_batch(feats, targets)
        x = model.prepare_input(feat)
        pred = model.forward(x, train=False).data  # (B, T, 29)
        for k, t in enumerate(chunk):
            t_len = t.n_frames
            outputs[t.trial_id] = target_norm.invert(pred[k, :t_len].T)
    return outputs


def _validation_mcd(model: SpeechDecoder, trials: list[PreparedTrial],
                    stats: FeatureStats, target_norm: TargetNorm,
                    batch_size: int) -> float:
    outputs = _decode_batches(model, trials, stats, target_norm, batch_size)
    scores = [mcd(outputs[t.trial_id][MEL_CHANNELS], t.target[MEL_CHANNELS])
              for t in trials]
    return float(np.mean(scores))


def train_model(config: TrainConfig, train_set: list[PreparedTrial],
                val_set: list[PreparedTrial],
                model: SpeechDecoder | None = None,
                grid: GridGeometry | None = None,
                verbose: bool = False) -> TrainResult:
    """Joint MSE(+CLIP) optimization with per-epoch validation MCD and
    early stopping.  Validation MCD is computed on non-augmented trials in
    the raw Mel domain."""
    train_ids = {t.trial_id for t in train_set}
    if train_ids & {t.trial_id for t in val_set}:
        raise TrainingError("train and validation sets overlap")
    originals = [t for t in train_set if not t.is_augmented]
    if not originals:
        raise TrainingError("no original trials in the training set")
    if config.use_augmentation and not any(t.is_augmented for t in train_set):
        train_set = augment_prepared(train_set, config.augmentation_factor,
                                     seed=config.seed + 7919)

    stats = fit_stats([t.features for t in originals])
    target_norm = TargetNorm.fit(originals)
    if model is None:
        if grid is None:
            raise TrainingError("grid geometry required to build a new model")
        model = SpeechDecoder(config.encoder_variant, grid, seed=config.seed,
                              cnn_kernel=config.cnn_kernel,
                              head_dropout=config.head_dropout)

    train_feats = {t.trial_id: apply_zscore(t.features, stats) for t in train_set}
    train_targets = {t.trial_id: target_norm.apply(t.target) for t in train_set}

    optimizer = Adam(model.parameters(), lr=config.lr)
    stop = EarlyStopState(patience=config.patience)
    history: list[EpochRecord] = []
    val_set = [t for t in val_set if not t.is_augmented]

    for epoch in range(config.max_epochs):
        optimizer.lr = config.lr * config.lr_decay ** epoch
        rng = np.random.default_rng(config.seed * 100_003 + epoch)
        order = rng.permutation(len(train_set))
        epoch_mse, epoch_clip, n_batches = 0.0, 0.0, 0
        epoch_retrieval = []
        for lo in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[lo:lo + config.batch_size]]
            feat, targ, mask = pad_batch(
                [train_feats[t.trial_id] for t in batch],
                [train_targets[t.trial_id] for t in batch])
            x = model.prepare_input(feat)
            latent = model.encode(x, train=True)
            pred = model.decoder.forward(latent, train=True, rng=rng)
            loss_mse = ad.masked_mse(pred, targ, mask)
            loss = loss_mse
            clip_value = 0.0
            if config.use_clip:
                proj = model.project(latent)  # (B, T, 29)
                projections = [ad.transpose(proj[k, :batch[k].n_frames], (1, 0))
                               for k in range(len(batch))]
                sentence_ids = [t.sentence_id for t in batch]
                candidate_sets = [
                    build_candidates(sentence_ids,
                                     [train_targets[t.trial_id] for t in batch],
                                     anchor=k, rng=rng)
                    for k in range(len(batch))
                ]
                loss_clip, trace = clip_loss(projections, candidate_sets,
                                             mode=config.clip_mode)
                loss = loss + loss_clip
                clip_value = loss_clip.item()
                epoch_retrieval.append(retrieval_accuracy(trace, candidate_sets))
            if not np.isfinite(loss.item()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}: mse={loss_mse.item()}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_mse += loss_mse.item()
            epoch_clip += clip_value
            n_batches += 1

        val_mcd = _validation_mcd(model, val_set, stats, target_norm,
                                  config.batch_size)
        record = EpochRecord(
            epoch=epoch,
            train_mse=epoch_mse / n_batches,
            train_clip=epoch_clip / n_batches,
            val_mcd=val_mcd,
            clip_retrieval=float(np.mean(epoch_retrieval)) if epoch_retrieval
            else np.nan,
        )
        history.append(record)
        if verbose:
            print(f"epoch {epoch}: mse={record.train_mse:.5f} "
                  f"clip={record.train_clip:.5f} val_mcd={val_mcd:.4f}")
        keep_going = early_stop_update(stop, val_mcd, snapshot_fn=model.snapshot)
        if config.stop_below_mcd is not None and val_mcd < config.stop_below_mcd:
            break
        if not keep_going:
            break

    if stop.best_params is not None:
        model.load_snapshot(stop.best_params)
    return TrainResult(model=model, history=history, stats=stats,
                       target_norm=target_norm, best_val_mcd=stop.best_val_mcd,
                       config=config)


# ---------------------------------------------------------------------------
# Evaluation of a trained model on held-out trials
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    trial_ids: list[str]
    pcc_all: list[float]
    pcc_mel: list[float]
    pcc_ap: list[float]
    pcc_f0: list[float]
    mcd_scores: list[float]
    confusion: ConfusionMatrix
    macro_f1: float

    @property
    def mean_pcc(self) -> float:
        return float(np.mean(self.pcc_all))

    @property
    def mean_mcd(self) -> float:
        return float(np.mean(self.mcd_scores))


def vowel_templates(trials: list[PreparedTrial], exclude_trial: str
                    ) -> list[tuple[str, np.ndarray]]:
    """Ground-truth Mel segments of every vowel instance in the corpus,
    excluding the trial under evaluation."""
    templates = []
    for t in trials:
        if t.trial_id == exclude_trial or t.is_augmented:
            continue
        for iv in t.vowel_intervals:
            templates.append((iv.label,
                              t.target[MEL_CHANNELS, iv.start_frame:iv.end_frame]))
    return templates


def evaluate_model(model: SpeechDecoder, test_set: list[PreparedTrial],
                   all_trials: list[PreparedTrial], stats: FeatureStats,
                   target_norm: TargetNorm, batch_size: int = 16,
                   vowel_classes: tuple[str, ...] | None = None) -> EvalResult:
    outputs = _decode_batches(model, test_set, stats, target_norm, batch_size)
    if vowel_classes is None:
        vowel_classes = tuple(sorted({iv.label for t in all_trials
                                      for iv in t.vowel_intervals}))
    cm = ConfusionMatrix.empty(vowel_classes)
    result = EvalResult([], [], [], [], [], [], cm, 0.0)
    for t in test_set:
        decoded = outputs[t.trial_id]
        result.trial_ids.append(t.trial_id)
        result.pcc_all.append(sentence_pcc(decoded, t.target, "all"))
        result.pcc_mel.append(sentence_pcc(decoded, t.target, "mel"))
        result.pcc_ap.append(sentence_pcc(decoded, t.target, "ap"))
        result.pcc_f0.append(sentence_pcc(decoded, t.target, "f0"))
        result.mcd_scores.append(mcd(decoded[MEL_CHANNELS], t.target[MEL_CHANNELS]))
        templates = vowel_templates(all_trials, exclude_trial=t.trial_id)
        for iv in t.vowel_intervals:
            segment = decoded[MEL_CHANNELS, iv.start_frame:iv.end_frame]
            if segment.shape[1] < 1 or not templates:
                continue
            cm.add(iv.label, classify_vowel(segment, templates))
    _, result.macro_f1 = f1_scores(cm)
    return result


# ---------------------------------------------------------------------------
# Cross-validation, transfer, shuffled baseline
# ---------------------------------------------------------------------------

@dataclass
class FoldOutcome:
    fold_index: int
    eval_result: EvalResult
    best_val_mcd: float


@dataclass
class CVResult:
    label: str
    folds: list[FoldOutcome]
    confusion: ConfusionMatrix
    macro_f1: float

    @property
    def sentence_pccs(self) -> list[float]:
        return [p for f in self.folds for p in f.eval_result.pcc_all]

    @property
    def sentence_mcds(self) -> list[float]:
        return [m for f in self.folds for m in f.eval_result.mcd_scores]

    def summary_row(self) -> dict:
        pccs, mcds = self.sentence_pccs, self.sentence_mcds
        return {
            "setup": self.label,
            "avg_pcc": float(np.mean(pccs)),
            "sd_pcc": float(np.std(pccs)),
            "avg_mcd": float(np.mean(mcds)),
            "sd_mcd": float(np.std(mcds)),
            "f1": self.macro_f1,
        }


def summary_table(rows: list[dict]) -> str:
    """Plain-text table shaped like the per-setup summary (PCC, MCD, F1)."""
    lines = [f"{'Setup':<18}{'Avg PCC':>16}{'Avg MCD':>16}{'F1_score':>10}"]
    for r in rows:
        lines.append(
            f"{r['setup']:<18}"
            f"{r['avg_pcc']:.3f}±{r['sd_pcc']:.3f}".ljust(34)
            + f"{r['avg_mcd']:.3f}±{r['sd_mcd']:.3f}".ljust(16)
            + f"{r['f1']:>6.2f}"
        )
    return "\n".join(lines)


def run_cv(config: TrainConfig, corpus: Corpus,
           prepared: list[PreparedTrial] | None = None,
           folds: list[FoldAssignment] | None = None,
           warm_start: SpeechDecoder | None = None,
           transfer: bool = False,
           verbose: bool = False) -> CVResult:
    """Train and evaluate one model per fold; aggregates sentence metrics
    and pools the vowel confusion matrix across test sets."""
    if prepared is None:
        prepared = preprocess_corpus(corpus)
    if folds is None:
        folds = make_folds(corpus, config.n_folds, config.ratios, config.seed,
                           config.group_by_sentence)
    vowel_classes = tuple(sorted(corpus.vowel_inventory))
    pooled = ConfusionMatrix.empty(vowel_classes)
    outcomes = []
    for fold in folds:
        train_set = select_trials(prepared, fold.train_ids)
        val_set = select_trials(prepared, fold.validation_ids)
        test_set = select_trials(prepared, fold.test_ids)
        model = None
        if warm_start is not None:
            model = transfer_init(warm_start, corpus.grid,
                                  seed=config.seed + fold.fold_index)
        result = train_model(config, train_set, val_set, model=model,
                             grid=corpus.grid, verbose=verbose)
        ev = evaluate_model(result.model, test_set, prepared, result.stats,
                            result.target_norm, config.batch_size, vowel_classes)
        pooled.counts += ev.confusion.counts
        outcomes.append(FoldOutcome(fold.fold_index, ev, result.best_val_mcd))
    _, macro = f1_scores(pooled)
    return CVResult(label=config.label(transfer=transfer), folds=outcomes,
                    confusion=pooled, macro_f1=macro)


def run_transfer(config: TrainConfig, source_corpus: Corpus,
                 target_corpus: Corpus,
                 source_prepared: list[PreparedTrial] | None = None,
                 target_prepared: list[PreparedTrial] | None = None,
                 verbose: bool = False) -> tuple[CVResult, TrainResult]:
    """Pretrain on the source corpus (fold 0 split), then fine-tune all
    parameters per target fold starting from the shared weights."""
    if config.encoder_variant != "vit":
        raise TrainingError("transfer learning requires the ViT encoder")
    if source_prepared is None:
        source_prepared = preprocess_corpus(source_corpus)
    source_fold = make_folds(source_corpus, config.n_folds, config.ratios,
                             config.seed, config.group_by_sentence)[0]
    source_result = train_model(
        config,
        select_trials(source_prepared, source_fold.train_ids),
        select_trials(source_prepared, source_fold.validation_ids),
        grid=source_corpus.grid, verbose=verbose)
    cv = run_cv(config, target_corpus, prepared=target_prepared,
                warm_start=source_result.model, transfer=True, verbose=verbose)
    return cv, source_result


def shuffled_target_baseline(config: TrainConfig, corpus: Corpus,
                             n_runs: int = 10,
                             prepared: list[PreparedTrial] | None = None,
                             verbose: bool = False) -> list[float]:
    """Macro F1 of models trained with permuted trial-to-target mappings
    (fold 0 split), for chance-level significance testing."""
    if prepared is None:
        prepared = preprocess_corpus(corpus)
    fold = make_folds(corpus, config.n_folds, config.ratios, config.seed,
                      config.group_by_sentence)[0]
    vowel_classes = tuple(sorted(corpus.vowel_inventory))
    scores = []
    for run in range(n_runs):
        rng = np.random.default_rng(config.seed * 1_000_003 + run)
        fit_ids = list(fold.train_ids) + list(fold.validation_ids)
        perm = rng.permutation(len(fit_ids))
        donor = {fit_ids[i]: fit_ids[int(perm[i])] for i in range(len(fit_ids))}
        by_id = {t.trial_id: t for t in prepared}
        shuffled = []
        for t in prepared:
            if t.trial_id in donor:
                d = by_id[donor[t.trial_id]]
                shuffled.append(replace_targets(t, d))
            else:
                shuffled.append(t)
        run_config = replace(config, seed=config.seed + 31 * (run + 1))
        result = train_model(run_config,
                             select_trials(shuffled, fold.train_ids),
                             select_trials(shuffled, fold.validation_ids),
                             grid=corpus.grid, verbose=verbose)
        ev = evaluate_model(result.model, select_trials(prepared, fold.test_ids),
                            prepared, result.stats, result.target_norm,
                            config.batch_size, vowel_classes)
        scores.append(ev.macro_f1)
    return scores


def replace_targets(trial: PreparedTrial, donor: PreparedTrial) -> PreparedTrial:
    """Trial with its acoustic target (and vowel labels) taken from a donor;
    lengths are reconciled by truncating to the shorter trial."""
    t_len = min(trial.n_frames, donor.target.shape[1])
    ivs = tuple(iv for iv in donor.vowel_intervals if iv.end_frame <= t_len)
    return PreparedTrial(
        trial_id=trial.trial_id,
        sentence_id=donor.sentence_id,
        repetition_index=trial.repetition_index,
        features=trial.features[:, :, :t_len],
        target=donor.target[:, :t_len].copy(),
        vowel_intervals=ivs,
        block_id=trial.block_id,
        is_augmented=trial.is_augmented,
    )
