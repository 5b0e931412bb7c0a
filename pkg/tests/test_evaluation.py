import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import rankdata

from neurodecode import autodiff as ad
from neurodecode.autodiff import Tensor
from neurodecode.evaluation import (MCD_CONST, ConfusionMatrix,
                                    EvaluationError, classify_vowel,
                                    f1_scores, mann_whitney_u, mcd, pcc,
                                    saliency_raw, sentence_pcc, smoothgrad,
                                    aggregate_saliency, wilcoxon_signed_rank)


def wilcoxon_oracle(x, y):
    """Two-sided p by exhaustive sign enumeration with average ranks."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    center = n * (n + 1) / 4
    target = abs(w_obs - center)
    hits = 0
    for signs in itertools.product([0, 1], repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if abs(w - center) >= target - 1e-9:
            hits += 1
    return hits / 2 ** n


def mann_whitney_oracle(x, y):
    """Two-sided p by exhaustive relabeling of the pooled sample."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = x.size, y.size
    pooled = np.concatenate([x, y])
    ranks = rankdata(pooled)
    u_obs = ranks[:n].sum() - n * (n + 1) / 2
    center = n * m / 2
    target = abs(u_obs - center)
    hits = total = 0
    for combo in itertools.combinations(range(n + m), n):
        u = ranks[list(combo)].sum() - n * (n + 1) / 2
        total += 1
        if abs(u - center) >= target - 1e-9:
            hits += 1
    return hits / total


class TestPcc:
    def test_perfect_correlation(self):
        x = np.arange(10.0)
        assert pcc(x, 3 * x + 1) == pytest.approx(1.0)
        assert pcc(x, -x) == pytest.approx(-1.0)

    def test_constant_input_gives_zero(self):
        assert pcc(np.ones(5), np.arange(5.0)) == 0.0

    def test_matches_numpy_corrcoef(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(2, 40))
        assert pcc(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1])

    def test_group_averaging(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(29, 30))
        a_hat = a + 0.1 * rng.normal(size=(29, 30))
        per_channel = [pcc(a_hat[c], a[c]) for c in range(25)]
        assert sentence_pcc(a_hat, a, "mel") == pytest.approx(np.mean(per_channel))

    def test_valid_mask_restricts_frames(self):
        a = np.zeros((29, 6))
        a[:, :4] = np.random.default_rng(2).normal(size=(29, 4))
        a_hat = a.copy()
        a_hat[:, 4:] = 77.0  # padding garbage must be ignored
        mask = np.array([1, 1, 1, 1, 0, 0], dtype=bool)
        assert sentence_pcc(a_hat, a, "all", mask) == pytest.approx(1.0)


class TestMcd:
    def test_hand_computed_value(self):
        mel_hat = np.zeros((25, 2))
        mel = np.zeros((25, 2))
        mel[0, 0] = 3.0  # frame distances: 3 and 0
        want = MCD_CONST * 1.5
        assert mcd(mel_hat, mel) == pytest.approx(want)

    def test_constant_value(self):
        assert MCD_CONST == pytest.approx((10 / math.log(10)) * math.sqrt(2))

    def test_zero_for_identical(self):
        mel = np.random.default_rng(3).normal(size=(25, 9))
        assert mcd(mel, mel) == 0.0

    def test_wrong_shape_rejected(self):
        with pytest.raises(EvaluationError):
            mcd(np.zeros((24, 5)), np.zeros((24, 5)))


class TestClassifyVowel:
    def test_picks_nearest_template(self):
        rng = np.random.default_rng(4)
        profiles = {v: rng.normal(size=25) for v in "aiu"}
        templates = [(v, np.tile(p[:, None], (1, 6))) for v, p in profiles.items()]
        segment = np.tile(profiles["i"][:, None], (1, 6)) + 0.01
        assert classify_vowel(segment, templates) == "i"

    def test_dtw_used_for_unequal_lengths(self):
        rng = np.random.default_rng(5)
        profiles = {v: rng.normal(size=25) for v in "ae"}
        templates = [(v, np.tile(p[:, None], (1, 9))) for v, p in profiles.items()]
        segment = np.tile(profiles["e"][:, None], (1, 4))
        assert classify_vowel(segment, templates) == "e"

    def test_no_templates_rejected(self):
        with pytest.raises(EvaluationError):
            classify_vowel(np.zeros((25, 3)), [])


class TestF1:
    def test_perfect_predictions(self):
        cm = ConfusionMatrix.empty(("a", "i"))
        for label in ("a", "a", "i"):
            cm.add(label, label)
        per_class, macro = f1_scores(cm)
        assert per_class == {"a": 1.0, "i": 1.0}
        assert macro == 1.0

    def test_hand_computed(self):
        cm = ConfusionMatrix.empty(("a", "i"))
        cm.add("a", "a")
        cm.add("a", "i")
        cm.add("i", "i")
        per_class, macro = f1_scores(cm)
        # a: tp=1, fp=0, fn=1 -> 2/3; i: tp=1, fp=1, fn=0 -> 2/3
        assert per_class["a"] == pytest.approx(2 / 3)
        assert per_class["i"] == pytest.approx(2 / 3)
        assert macro == pytest.approx(2 / 3)

    def test_unseen_class_excluded_from_macro(self):
        cm = ConfusionMatrix.empty(("a", "i", "u"))
        cm.add("a", "a")
        cm.add("i", "a")
        _, macro = f1_scores(cm)
        # u has no true instances; macro over a (2/3) and i (0)
        assert macro == pytest.approx((2 / 3 + 0.0) / 2)


class TestWilcoxon:
    def test_identical_samples_give_one(self):
        x = np.arange(5.0)
        assert wilcoxon_signed_rank(x, x) == 1.0

    def test_matches_enumeration_oracle_random(self):
        rng = np.random.default_rng(6)
        for _ in range(250):
            n = int(rng.integers(1, 9))
            x = rng.integers(0, 5, size=n).astype(float)
            y = rng.integers(0, 5, size=n).astype(float)
            got = wilcoxon_signed_rank(x, y)
            want = wilcoxon_oracle(x, y)
            assert got == pytest.approx(want, abs=1e-12), (x, y)

    def test_strong_effect_small_p(self):
        x = np.arange(1.0, 13.0)
        p = wilcoxon_signed_rank(x, x + 5.0)
        assert p == pytest.approx(2 / 2 ** 12)

    def test_normal_approximation_for_large_n(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=60)
        y = x + 0.8 + rng.normal(scale=0.3, size=60)
        assert wilcoxon_signed_rank(x, y) < 1e-6

    def test_length_mismatch_rejected(self):
        with pytest.raises(EvaluationError):
            wilcoxon_signed_rank(np.zeros(3), np.zeros(4))


class TestMannWhitney:
    def test_matches_enumeration_oracle_random(self):
        rng = np.random.default_rng(8)
        for _ in range(250):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(1, 9 - n)) if n < 8 else 1
            x = rng.integers(0, 4, size=n).astype(float)
            y = rng.integers(0, 4, size=m).astype(float)
            got = mann_whitney_u(x, y)
            want = mann_whitney_oracle(x, y)
            assert got == pytest.approx(want, abs=1e-12), (x, y)

    def test_complete_separation(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        y = np.array([10.0, 11.0, 12.0, 13.0])
        # most extreme of C(8,4)=70 relabelings, two-sided
        assert mann_whitney_u(x, y) == pytest.approx(2 / 70)

    def test_normal_approximation_for_large_samples(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=40)
        y = rng.normal(loc=1.5, size=40)
        assert mann_whitney_u(x, y) < 1e-6

    def test_empty_sample_rejected(self):
        with pytest.raises(EvaluationError):
            mann_whitney_u(np.zeros(0), np.ones(3))


class TestSaliency:
    @staticmethod
    def quadratic_loss(x):
        return (x ** 2).sum()

    def test_raw_gradient_of_quadratic(self):
        e = np.random.default_rng(10).normal(size=(2, 21, 4))
        s = saliency_raw(self.quadratic_loss, e)
        np.testing.assert_allclose(s.values, 2 * e, rtol=1e-10)

    def test_smoothgrad_sigma_to_zero_matches_raw(self):
        e = np.random.default_rng(11).normal(size=(2, 21, 4))
        raw = saliency_raw(self.quadratic_loss, e)
        smooth = smoothgrad(self.quadratic_loss, e, n=1, sigma=1e-12, seed=0)
        np.testing.assert_allclose(smooth.values, raw.values, atol=1e-6)

    def test_averaging_reduces_noise(self):
        e = np.random.default_rng(12).normal(size=(1, 21, 3))
        raw = saliency_raw(self.quadratic_loss, e)
        smooth = smoothgrad(self.quadratic_loss, e, n=200, sigma=0.5, seed=1)
        # E[grad] = 2(e + noise) averages back toward 2e
        assert np.abs(smooth.values - raw.values).mean() < 0.2

    def test_constant_input_rejected(self):
        with pytest.raises(EvaluationError):
            smoothgrad(self.quadratic_loss, np.ones((1, 21, 3)))

    def test_deterministic_given_seed(self):
        e = np.random.default_rng(13).normal(size=(1, 21, 3))
        a = smoothgrad(self.quadratic_loss, e, n=5, sigma=0.15, seed=4)
        b = smoothgrad(self.quadratic_loss, e, n=5, sigma=0.15, seed=4)
        np.testing.assert_array_equal(a.values, b.values)

    def test_aggregate_by_electrode_and_feature(self):
        values = np.zeros((4, 21, 5))
        values[2] = 1.0
        from neurodecode.evaluation import SaliencyMap
        s = SaliencyMap(values=values)
        per_electrode = aggregate_saliency(s, "electrode")
        np.testing.assert_allclose(per_electrode, [0, 0, 1, 0])
        grid = aggregate_saliency(s, "electrode", grid_shape=(2, 2))
        assert grid.shape == (2, 2)
        per_feature = aggregate_saliency(s, "feature")
        np.testing.assert_allclose(per_feature, 0.25)
