import numpy as np
import pytest

from cxrelay.metrics import (
    ConfusionMatrix,
    MetricsError,
    UndefinedAUCError,
    confusion,
    f_beta,
    percent,
    render_report,
    report,
    report_dict,
    roc_auc,
)

# confusion matrix reconstructed from the published per-class recalls over
# supports 234/390: actual-Normal row (185 right, 49 wrong),
# actual-Pneumonia row (12 wrong, 378 right)
RECONSTRUCTED = ConfusionMatrix(((185, 49), (12, 378)))
PUBLISHED_TABLE = {
    "Normal": (95, 79, 86, 234),
    "Pneumonia": (88, 97, 93, 390),
    "accuracy": 90,
    "macro": (92, 88, 89),
    "weighted": (91, 90, 90),
}


def auc_pairwise_oracle(scores, labels):
    """O(n^2) Mann-Whitney statistic with half-credit ties."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestConfusion:
    def test_all_correct_diagonal(self):
        cm = confusion([0, 1, 1, 0], [0, 1, 1, 0])
        assert cm.counts == ((2, 0), (0, 2))

    def test_total_confusion(self):
        cm = confusion([0, 1], [1, 0])
        assert cm.counts == ((0, 1), (1, 0))

    def test_partition(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, 100)
        p = rng.integers(0, 2, 100)
        assert confusion(y, p).total == 100

    def test_length_mismatch(self):
        with pytest.raises(MetricsError):
            confusion([0, 1], [0])


class TestReport:
    def test_reconstruction_matches_published_within_one_point(self):
        rep = report(RECONSTRUCTED)
        for i, name in enumerate(("Normal", "Pneumonia")):
            want_p, want_r, want_f, want_s = PUBLISHED_TABLE[name]
            got = rep.per_class[i]
            assert abs(percent(got.precision) - want_p) <= 1
            assert abs(percent(got.recall) - want_r) <= 1
            assert abs(percent(got.f1) - want_f) <= 1
            assert got.support == want_s
        assert percent(rep.accuracy) == PUBLISHED_TABLE["accuracy"]
        for got, want in zip(rep.macro, PUBLISHED_TABLE["macro"]):
            assert abs(percent(got) - want) <= 1
        for got, want in zip(rep.weighted, PUBLISHED_TABLE["weighted"]):
            assert abs(percent(got) - want) <= 1

    def test_exact_reconstruction_values(self):
        rep = report(RECONSTRUCTED)
        assert abs(rep.accuracy - 563 / 624) < 1e-12
        assert abs(rep.per_class[1].precision - 378 / 427) < 1e-12
        assert abs(rep.per_class[0].recall - 185 / 234) < 1e-12

    def test_perfect_matrix(self):
        rep = report(ConfusionMatrix(((7, 0), (0, 9))))
        assert rep.accuracy == 1.0
        for m in rep.per_class:
            assert m.precision == m.recall == m.f1 == 1.0

    def test_zero_denominator_flag(self):
        # nothing ever predicted Normal
        rep = report(ConfusionMatrix(((0, 5), (0, 5))))
        assert rep.per_class[0].precision == 0.0
        assert rep.zero_division

    def test_self_confusion_is_perfect(self):
        for seed in range(5):
            y = np.random.default_rng(seed).integers(0, 2, 50)
            if y.min() == y.max():
                continue
            assert report(confusion(y, y)).accuracy == 1.0

    def test_weighted_recall_equals_accuracy(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            y = rng.integers(0, 2, 60)
            p = rng.integers(0, 2, 60)
            if y.min() == y.max():
                continue
            rep = report(confusion(y, p))
            assert abs(rep.weighted[1] - rep.accuracy) < 1e-12


class TestFBeta:
    def test_beta1_is_f1(self):
        assert f_beta(0.5, 0.5, 1.0) == pytest.approx(0.5)
        for p, r in [(0.3, 0.9), (0.7, 0.2)]:
            f1 = 2 * p * r / (p + r)
            assert f_beta(p, r, 1.0) == pytest.approx(f1)

    def test_large_beta_tracks_recall(self):
        assert f_beta(0.5, 1.0, 100.0) > 0.99

    def test_beta2_value(self):
        # 5 * 0.88 * 0.97 / (4 * 0.88 + 0.97) = 4.268 / 4.49
        assert f_beta(0.88, 0.97, 2.0) == pytest.approx(4.268 / 4.49, abs=1e-12)

    def test_zero_denominator(self):
        assert f_beta(0.0, 0.0, 2.0) == 0.0


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == pytest.approx(1.0)

    def test_all_tied_is_half(self):
        assert roc_auc([0.5] * 10, [0, 1] * 5) == pytest.approx(0.5)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = 50
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                continue
            scores = np.round(rng.uniform(0, 1, n), 2)  # induces ties
            got = roc_auc(scores, labels)
            want = auc_pairwise_oracle(scores.tolist(), labels.tolist())
            assert got == pytest.approx(want, abs=1e-9)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, 40)
        labels[0], labels[1] = 0, 1
        scores = rng.uniform(0, 1, 40)
        a = roc_auc(scores, labels)
        b = roc_auc(np.exp(3 * scores) + 7, labels)
        assert a == pytest.approx(b, abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(8)
        labels = np.array([0, 1] * 20)
        scores = rng.uniform(0, 1, 40)
        perm = rng.permutation(40)
        assert roc_auc(scores, labels) == pytest.approx(
            roc_auc(scores[perm], labels[perm]), abs=1e-12)

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedAUCError):
            roc_auc([0.1, 0.2], [1, 1])


class TestRendering:
    def test_text_mirrors_published_shape(self):
        text = render_report(report(RECONSTRUCTED))
        lines = text.splitlines()
        assert lines[0].split() == ["precision", "recall", "f1-score", "support"]
        assert any(l.startswith("Normal") for l in lines)
        assert any(l.startswith("Pneumonia") for l in lines)
        assert any(l.startswith("accuracy") for l in lines)
        assert any(l.startswith("macro avg") for l in lines)
        assert any(l.startswith("weighted avg") for l in lines)
        normal_row = next(l for l in lines if l.startswith("Normal")).split()
        assert normal_row[1:] == ["94", "79", "86", "234"]

    def test_dict_form(self):
        d = report_dict(report(RECONSTRUCTED))
        assert d["Pneumonia"]["support"] == 390
        assert d["accuracy"] == pytest.approx(563 / 624)
