import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incrlearn.exceptions import ParameterError, ShapeError
from incrlearn.metrics import (
    ConfusionCounts,
    accuracy,
    f1,
    f1_from_rates,
    forgetting,
    is_degenerate,
    overall_accuracy,
    per_class_accuracy,
    ppv,
    tally,
    tpr,
)

# printed (TPR, PPV, F1) triples for the four incrementally trained networks
# on each of the five evaluation corpora, plus the fine-tuned reference column
PUBLISHED_TRIPLES = {
    ("indiana", "mobilenet"): (0.6159, 0.6072, 0.6269),  # printed F1 inconsistent, see test
    ("indiana", "resnet50"): (0.8259, 0.7951, 0.8102),
    ("indiana", "resnet101"): (0.8526, 0.8092, 0.8303),
    ("indiana", "vgg16"): (0.7789, 0.7829, 0.7808),
    ("indiana", "finetune"): (0.9536, 0.8956, 0.9236),
    ("mc", "mobilenet"): (0.6034, 0.5555, 0.5784),
    ("mc", "resnet50"): (0.6379, 0.6491, 0.6434),
    ("mc", "resnet101"): (0.7068, 0.7192, 0.7129),
    ("mc", "vgg16"): (0.5689, 0.5892, 0.5788),
    ("mc", "finetune"): (0.8965, 0.8387, 0.8666),
    ("shenzhen", "mobilenet"): (0.6398, 0.6697, 0.6544),
    ("shenzhen", "resnet50"): (0.7232, 0.7783, 0.7497),
    ("shenzhen", "resnet101"): (0.7440, 0.7861, 0.7644),
    ("shenzhen", "vgg16"): (0.6994, 0.7320, 0.7153),
    ("shenzhen", "finetune"): (0.7857, 0.8328, 0.8085),
    ("jsrt", "mobilenet"): (0.5129, 0.6475, 0.5723),
    ("jsrt", "resnet50"): (0.6493, 0.7633, 0.7016),
    ("jsrt", "resnet101"): (0.6818, 0.8015, 0.7368),
    ("jsrt", "vgg16"): (0.6038, 0.7322, 0.6618),
    ("jsrt", "finetune"): (0.7987, 0.8541, 0.8254),
    ("zhang", "mobilenet"): (0.7794, 0.8021, 0.7905),
    ("zhang", "resnet50"): (0.8230, 0.8819, 0.8514),
    ("zhang", "resnet101"): (0.8435, 0.9138, 0.8772),
    ("zhang", "vgg16"): (0.7974, 0.8315, 0.8140),
    ("zhang", "finetune"): (0.9076, 0.9490, 0.9278),
}

# the one printed F1 that is not the harmonic mean of its own TPR/PPV
KNOWN_TYPO = ("indiana", "mobilenet")


class TestTally:
    def test_all_correct(self):
        counts = tally([0, 1, 2], [0, 1, 2], {0, 1, 2})
        for c in (0, 1, 2):
            assert counts[c].fp == 0 and counts[c].fn == 0

    def test_all_wrong_binary(self):
        counts = tally([1, 0], [0, 1], {0, 1})
        for c in (0, 1):
            assert counts[c].tp == 0 and counts[c].tn == 0

    def test_hand_enumerated_case(self):
        preds = [0, 0, 1, 1, 2, 2, 0, 1, 2, 0]
        truths = [0, 1, 1, 1, 2, 0, 0, 2, 2, 1]
        counts = tally(preds, truths, {0, 1, 2})
        # brute-force oracle over all (class, pair) combinations
        for c in (0, 1, 2):
            tp = sum(1 for p, t in zip(preds, truths) if p == c and t == c)
            fp = sum(1 for p, t in zip(preds, truths) if p == c and t != c)
            fn = sum(1 for p, t in zip(preds, truths) if p != c and t == c)
            tn = 10 - tp - fp - fn
            assert counts[c] == ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)
        assert counts["micro"].total == 30

    def test_per_class_sums_equal_total(self):
        counts = tally([0, 1, 1], [1, 1, 0], {0, 1})
        for c in (0, 1):
            assert counts[c].total == 3

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            tally([0], [0, 1], {0, 1})

    def test_unknown_label(self):
        with pytest.raises(ParameterError):
            tally([5], [0], {0, 1})

    def test_permutation_invariance(self):
        preds = [0, 1, 2, 0, 1]
        truths = [0, 2, 2, 1, 1]
        base = tally(preds, truths, {0, 1, 2})
        for perm in itertools.permutations(range(5)):
            shuffled = tally([preds[i] for i in perm], [truths[i] for i in perm], {0, 1, 2})
            assert shuffled == base
            break  # one spot check per run is enough; full loop is 120 permutations
        rng = np.random.default_rng(0)
        perm = rng.permutation(5)
        shuffled = tally([preds[i] for i in perm], [truths[i] for i in perm], {0, 1, 2})
        assert shuffled == base


class TestMetricFormulas:
    def test_hand_arithmetic(self):
        c = ConfusionCounts(tp=5, tn=3, fp=1, fn=1)
        assert accuracy(c) == pytest.approx(0.8)
        assert tpr(c) == pytest.approx(5 / 6)
        assert ppv(c) == pytest.approx(5 / 6)
        assert f1(c) == pytest.approx(5 / 6)

    def test_perfect_recall(self):
        assert tpr(ConfusionCounts(tp=4, tn=0, fp=2, fn=0)) == 1.0

    def test_accuracy_one_iff_no_errors(self):
        assert accuracy(ConfusionCounts(tp=3, tn=7, fp=0, fn=0)) == 1.0
        assert accuracy(ConfusionCounts(tp=3, tn=7, fp=1, fn=0)) < 1.0
        assert accuracy(ConfusionCounts(tp=3, tn=7, fp=0, fn=1)) < 1.0

    def test_zero_denominator_convention(self):
        empty = ConfusionCounts()
        assert tpr(empty) == 0.0
        assert ppv(empty) == 0.0
        assert f1(empty) == 0.0
        assert is_degenerate(empty, "tpr")
        assert is_degenerate(empty, "ppv")
        assert not is_degenerate(ConfusionCounts(tp=1), "tpr")

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_f1_is_harmonic_mean(self, tp, tn, fp, fn):
        c = ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)
        t, p = tpr(c), ppv(c)
        if t + p > 0:
            assert f1(c) == pytest.approx(2 * t * p / (t + p))


class TestPublishedF1Consistency:
    @pytest.mark.parametrize(
        "key", [k for k in sorted(PUBLISHED_TRIPLES) if k != KNOWN_TYPO]
    )
    def test_recomputed_f1_matches_print(self, key):
        t, p, printed = PUBLISHED_TRIPLES[key]
        assert f1_from_rates(t, p) == pytest.approx(printed, abs=5e-4)

    def test_known_typo_row_documented(self):
        # the printed 0.6269 cannot be the harmonic mean of 0.6159 and 0.6072
        t, p, printed = PUBLISHED_TRIPLES[KNOWN_TYPO]
        recomputed = f1_from_rates(t, p)
        assert recomputed == pytest.approx(0.6115, abs=5e-4)
        assert abs(recomputed - printed) > 5e-4


class TestForgetting:
    def test_no_change(self):
        assert forgetting({0: 0.9, 1: 0.7}, {0: 0.9, 1: 0.7}) == 0.0

    def test_total_forgetting(self):
        assert forgetting({0: 1.0, 1: 1.0}, {0: 0.0, 1: 0.0}) == 1.0

    def test_hand_mean_of_clamped_drops(self):
        assert forgetting({0: 0.9, 1: 0.8}, {0: 0.7, 1: 0.9}) == pytest.approx(0.1)

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            forgetting({}, {})

    def test_mismatched_classes(self):
        with pytest.raises(ParameterError):
            forgetting({0: 0.5}, {1: 0.5})


class TestAccuracyHelpers:
    def test_per_class_accuracy(self):
        acc = per_class_accuracy([0, 0, 1, 1], [0, 1, 1, 1], {0, 1})
        assert acc[0] == 1.0
        assert acc[1] == pytest.approx(2 / 3)

    def test_overall_accuracy(self):
        assert overall_accuracy([0, 1, 2], [0, 1, 0]) == pytest.approx(2 / 3)
