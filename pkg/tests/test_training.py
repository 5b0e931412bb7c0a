import numpy as np
import pytest

from neurodecode import autodiff as ad
from neurodecode.corpus import (GridGeometry, SynthConfig,
                                generate_synthetic_corpus, make_folds)
from neurodecode.losses import build_candidates, clip_loss, mse_loss
from neurodecode.models import SpeechDecoder
from neurodecode.sigproc import apply_zscore, fit_stats
from neurodecode.training import (EarlyStopState, EpochRecord, TargetNorm,
                                  TrainConfig, TrainingError,
                                  augment_prepared, early_stop_update,
                                  history_to_csv, pad_batch,
                                  preprocess_corpus, run_cv, run_transfer,
                                  select_trials, shuffled_target_baseline,
                                  summary_table, train_model)


def small_corpus(seed=0, n_sentences=4, reps=2):
    cfg = SynthConfig(n_sentences=n_sentences, reps_per_sentence=reps,
                      grid=GridGeometry(1, 2), frames_range=(24, 30),
                      seed=seed)
    return generate_synthetic_corpus(cfg)


@pytest.fixture(scope="module")
def prepared():
    return preprocess_corpus(small_corpus())


class TestTrainConfig:
    def test_patience_validated(self):
        with pytest.raises(TrainingError):
            TrainConfig(patience=0)

    def test_clip_needs_batch(self):
        with pytest.raises(TrainingError):
            TrainConfig(use_clip=True, batch_size=1)

    def test_unknown_encoder_rejected(self):
        with pytest.raises(TrainingError):
            TrainConfig(encoder_variant="mlp")

    def test_labels(self):
        assert TrainConfig().label() == "ViT"
        assert TrainConfig(use_clip=True).label() == "ViT+CLIP"
        assert TrainConfig(encoder_variant="cnn",
                           use_augmentation=True).label() == "CNN+Aug"
        assert TrainConfig(use_clip=True).label(transfer=True) == "ViT+CLIP+TL"


class TestPreprocess:
    def test_feature_and_target_lengths_match(self, prepared):
        for t in prepared:
            assert t.features.shape[0] == 2
            assert t.features.shape[1] == 21
            assert t.features.shape[2] == t.target.shape[1]

    def test_cache_round_trip(self, tmp_path):
        corpus = small_corpus(seed=3, n_sentences=2, reps=1)
        first = preprocess_corpus(corpus, cache_dir=tmp_path)
        second = preprocess_corpus(corpus, cache_dir=tmp_path)
        for a, b in zip(first, second):
            np.testing.assert_allclose(a.features, b.features, rtol=1e-6)


class TestPadBatch:
    def test_shapes_and_mask(self, prepared):
        feats = [t.features for t in prepared[:3]]
        targs = [t.target for t in prepared[:3]]
        feat, targ, mask = pad_batch(feats, targs)
        t_max = max(f.shape[-1] for f in feats)
        assert feat.shape == (3, 2, 21, t_max)
        assert targ.shape == (3, t_max, 29)
        for k, f in enumerate(feats):
            assert mask[k].sum() == f.shape[-1]
            assert not mask[k, f.shape[-1]:].any()

    def test_masked_mse_equals_weighted_per_trial_losses(self, prepared):
        rng = np.random.default_rng(0)
        feats = [t.features for t in prepared[:3]]
        targs = [t.target for t in prepared[:3]]
        _, targ, mask = pad_batch(feats, targs)
        pred = rng.normal(size=targ.shape)
        batched = ad.masked_mse(ad.Tensor(pred), targ, mask).item()
        # the batch loss is the frame-weighted mean of per-trial MSEs
        per_trial = [mse_loss(pred[k, :t.shape[1]].T, t) for k, t in enumerate(targs)]
        weights = [t.shape[1] for t in targs]
        want = np.average(per_trial, weights=weights)
        assert batched == pytest.approx(want)

    def test_empty_batch_rejected(self):
        with pytest.raises(TrainingError):
            pad_batch([], [])


class TestTargetNorm:
    def test_round_trip(self, prepared):
        norm = TargetNorm.fit(prepared)
        a = prepared[0].target
        np.testing.assert_allclose(norm.invert(norm.apply(a)), a, atol=1e-10)

    def test_normalized_stats(self, prepared):
        norm = TargetNorm.fit(prepared)
        stacked = np.concatenate([norm.apply(t.target) for t in prepared], axis=1)
        np.testing.assert_allclose(stacked.mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(stacked.std(axis=1), 1.0, atol=1e-10)


class TestEarlyStop:
    def test_improvement_resets_counter(self):
        state = EarlyStopState(patience=3)
        assert early_stop_update(state, 2.0)
        assert early_stop_update(state, 3.0)
        assert state.counter == 1
        assert early_stop_update(state, 1.5)
        assert state.counter == 0 and state.best_val_mcd == 1.5

    def test_stops_after_patience_epochs(self):
        state = EarlyStopState(patience=20)
        early_stop_update(state, 1.0)
        for k in range(19):
            assert early_stop_update(state, 1.0 + k)
        assert not early_stop_update(state, 50.0)

    def test_equal_value_counts_as_no_improvement(self):
        state = EarlyStopState(patience=1)
        early_stop_update(state, 1.0)
        assert not early_stop_update(state, 1.0)

    def test_snapshot_taken_only_on_improvement(self):
        state = EarlyStopState(patience=5)
        calls = []
        early_stop_update(state, 2.0, snapshot_fn=lambda: calls.append(1))
        early_stop_update(state, 3.0, snapshot_fn=lambda: calls.append(1))
        early_stop_update(state, 1.0, snapshot_fn=lambda: calls.append(1))
        assert len(calls) == 2

    def test_non_finite_rejected(self):
        with pytest.raises(TrainingError):
            early_stop_update(EarlyStopState(patience=2), np.nan)


class TestHistoryCsv:
    def test_columns_exact(self):
        hist = [EpochRecord(0, 1.25, 0.5, 9.0), EpochRecord(1, 1.0, 0.25, 8.5)]
        lines = history_to_csv(hist).splitlines()
        assert lines[0] == "epoch,train_mse,train_clip,val_mcd"
        assert lines[1].split(",") == ["0", "1.25", "0.5", "9"]
        assert len(lines) == 3


class TestAugmentPrepared:
    def test_counts_and_flags(self, prepared):
        out = augment_prepared(list(prepared), factor=2, seed=0)
        originals = [t for t in out if not t.is_augmented]
        augmented = [t for t in out if t.is_augmented]
        assert len(originals) == len(prepared)
        assert len(augmented) == len(prepared)
        for t in augmented:
            assert "~aug" in t.trial_id
            assert t.source_trial is not None
            assert t.audio_donor_trial != t.source_trial

    def test_augmented_target_comes_from_donor(self, prepared):
        out = augment_prepared(list(prepared), factor=2, seed=1)
        by_id = {t.trial_id: t for t in out}
        for t in out:
            if t.is_augmented:
                donor = by_id[t.audio_donor_trial]
                np.testing.assert_array_equal(t.target, donor.target)
                assert t.features.shape[-1] == donor.target.shape[1]


def tiny_train_config(**kwargs):
    defaults = dict(batch_size=4, max_epochs=2, patience=20, seed=0)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestTrainModel:
    def test_overlapping_sets_rejected(self, prepared):
        with pytest.raises(TrainingError, match="overlap"):
            train_model(tiny_train_config(), prepared[:4], prepared[3:5])

    def test_missing_grid_rejected(self, prepared):
        with pytest.raises(TrainingError, match="grid"):
            train_model(tiny_train_config(), prepared[:4], prepared[4:6])

    def test_history_and_best_mcd(self, prepared):
        corpus = small_corpus()
        result = train_model(tiny_train_config(), prepared[:6], prepared[6:],
                             grid=corpus.grid)
        assert len(result.history) == 2
        assert result.best_val_mcd == min(r.val_mcd for r in result.history)
        assert all(np.isfinite(r.train_mse) for r in result.history)
        assert all(r.train_clip == 0.0 for r in result.history)

    def test_same_seed_gives_identical_history(self, prepared):
        corpus = small_corpus()
        cfg = tiny_train_config(use_clip=True)
        a = train_model(cfg, prepared[:6], prepared[6:], grid=corpus.grid)
        b = train_model(cfg, prepared[:6], prepared[6:], grid=corpus.grid)
        assert [(r.train_mse, r.train_clip, r.val_mcd) for r in a.history] == \
               [(r.train_mse, r.train_clip, r.val_mcd) for r in b.history]

    def test_augmentation_flag_expands_training_set(self, prepared):
        corpus = small_corpus()
        cfg = tiny_train_config(use_augmentation=True, augmentation_factor=2,
                                max_epochs=1)
        result = train_model(cfg, prepared[:6], prepared[6:], grid=corpus.grid)
        # still trains and validates on raw-domain originals only
        assert np.isfinite(result.history[0].val_mcd)

    def test_stop_below_mcd_halts_early(self, prepared):
        corpus = small_corpus()
        cfg = tiny_train_config(max_epochs=50, stop_below_mcd=1e9)
        result = train_model(cfg, prepared[:6], prepared[6:], grid=corpus.grid)
        assert len(result.history) == 1


class TestClipGradientRouting:
    def test_decoder_gradients_unchanged_by_clip(self, prepared):
        """The contrastive term reaches only the encoder and projector; the
        decoder's gradients must be bit-identical with the term on or off."""
        corpus = small_corpus()
        batch = prepared[:4]
        stats = fit_stats([t.features for t in batch])
        norm = TargetNorm.fit(batch)
        feat, targ, mask = pad_batch(
            [apply_zscore(t.features, stats) for t in batch],
            [norm.apply(t.target) for t in batch])

        def run(use_clip):
            model = SpeechDecoder("vit", corpus.grid, seed=0)
            rng = np.random.default_rng(42)
            x = model.prepare_input(feat)
            latent = model.encode(x, train=True)
            pred = model.decoder.forward(latent, train=True, rng=rng)
            loss = ad.masked_mse(pred, targ, mask)
            if use_clip:
                proj = model.project(latent)
                projections = [ad.transpose(proj[k, :batch[k].n_frames], (1, 0))
                               for k in range(len(batch))]
                sids = [t.sentence_id for t in batch]
                targets = [norm.apply(t.target) for t in batch]
                cands = [build_candidates(sids, targets, anchor=k, rng=rng)
                         for k in range(len(batch))]
                loss = loss + clip_loss(projections, cands)[0]
            loss.backward()
            return {name: p.grad.copy() for name, p in model.named_parameters()
                    if p.grad is not None}

        without = run(False)
        with_clip = run(True)
        decoder_names = [n for n in with_clip if n.startswith("decoder.")]
        assert decoder_names
        for n in decoder_names:
            np.testing.assert_array_equal(with_clip[n], without[n])
        encoder_diffs = [not np.array_equal(with_clip[n], without[n])
                         for n in with_clip if n.startswith("encoder.")]
        assert any(encoder_diffs)
        assert any(n.startswith("projector.") for n in with_clip)
        assert not any(n.startswith("projector.") for n in without)


class TestCrossValidation:
    def test_run_cv_structure(self):
        corpus = small_corpus(n_sentences=5, reps=2)
        prepared = preprocess_corpus(corpus)
        # 2 folds x 0.5 test ratio: the test chunks partition the corpus
        cfg = tiny_train_config(n_folds=2, ratios=(0.25, 0.25, 0.5),
                                max_epochs=1)
        cv = run_cv(cfg, corpus, prepared=prepared)
        assert cv.label == "ViT"
        assert len(cv.folds) == 2
        tested = [tid for f in cv.folds for tid in f.eval_result.trial_ids]
        assert sorted(tested) == sorted(t.trial_id for t in corpus.trials)
        row = cv.summary_row()
        assert set(row) == {"setup", "avg_pcc", "sd_pcc", "avg_mcd",
                            "sd_mcd", "f1"}
        assert 0.0 <= row["f1"] <= 1.0

    def test_summary_table_format(self):
        rows = [{"setup": "ViT", "avg_pcc": 0.8, "sd_pcc": 0.1,
                 "avg_mcd": 5.0, "sd_mcd": 0.5, "f1": 0.75}]
        table = summary_table(rows)
        assert "Setup" in table and "ViT" in table and "0.75" in table


class TestTransferAndBaseline:
    def test_transfer_requires_vit(self):
        corpus = small_corpus()
        cfg = tiny_train_config(encoder_variant="cnn")
        with pytest.raises(TrainingError, match="ViT"):
            run_transfer(cfg, corpus, corpus)

    def test_shuffled_baseline_returns_f1_scores(self):
        corpus = small_corpus(n_sentences=5, reps=2)
        prepared = preprocess_corpus(corpus)
        cfg = tiny_train_config(n_folds=2, ratios=(0.5, 0.25, 0.25),
                                max_epochs=1)
        scores = shuffled_target_baseline(cfg, corpus, n_runs=2,
                                          prepared=prepared)
        assert len(scores) == 2
        assert all(0.0 <= s <= 1.0 for s in scores)

    def test_shuffled_baseline_deterministic(self):
        corpus = small_corpus(n_sentences=5, reps=2)
        prepared = preprocess_corpus(corpus)
        cfg = tiny_train_config(n_folds=2, ratios=(0.5, 0.25, 0.25),
                                max_epochs=1)
        a = shuffled_target_baseline(cfg, corpus, n_runs=1, prepared=prepared)
        b = shuffled_target_baseline(cfg, corpus, n_runs=1, prepared=prepared)
        assert a == b
