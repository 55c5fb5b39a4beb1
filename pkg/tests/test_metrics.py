import math

import numpy as np
import pytest

from unihema.errors import DimensionError
from unihema.metrics import average_precision, bleu4, dice, exact_match, f1_macro, map50


def enumeration_ap(records, num_gt):
    """Independent AP oracle: walk the sorted detections, build the PR points,
    and integrate recall steps against the running best precision tail."""
    tp = fp = 0
    points = []
    for is_tp in records:
        if is_tp:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    ap = 0.0
    prev_recall = 0.0
    for i, (recall, _) in enumerate(points):
        best_tail = max(p for _, p in points[i:])
        ap += (recall - prev_recall) * best_tail
        prev_recall = recall
    return ap


class TestMap50:
    def test_perfect_predictions(self, rng):
        boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.15, 0.15]])
        preds = [[(b, 0, 1.0) for b in boxes]]
        gts = [(boxes, np.array([0, 0]))]
        value, per_class = map50(preds, gts)
        assert value == 1.0 and per_class[0] == 1.0

    def test_no_predictions(self):
        gts = [(np.array([[0.5, 0.5, 0.2, 0.2]]), np.array([1]))]
        value, per_class = map50([[]], gts)
        assert value == 0.0 and per_class[1] == 0.0

    def test_handcrafted_case_matches_enumeration(self):
        g1 = (0.3, 0.3, 0.2, 0.2)
        g2 = (0.7, 0.7, 0.2, 0.2)
        p_hit1 = (0.31, 0.3, 0.2, 0.2)    # IoU ~0.9 with g1
        p_miss = (0.52, 0.52, 0.05, 0.05)  # overlaps nothing at 0.5
        p_hit2 = (0.7, 0.71, 0.2, 0.2)
        preds = [[(p_hit1, 0, 0.9), (p_miss, 0, 0.8), (p_hit2, 0, 0.7)]]
        gts = [(np.array([g1, g2]), np.array([0, 0]))]
        value, _ = map50(preds, gts)
        expected = enumeration_ap([True, False, True], 2)
        assert abs(value - expected) <= 1e-9
        assert abs(expected - (0.5 + 0.5 * (2.0 / 3.0))) <= 1e-12

    def test_input_order_invariance(self, rng):
        boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2], [0.5, 0.2, 0.1, 0.1]])
        preds = [(tuple(b + rng.normal(0, 0.01, size=4)), int(c), float(s))
                 for b, c, s in zip(boxes, [0, 0, 1], [0.9, 0.6, 0.7])]
        gts = [(boxes, np.array([0, 0, 1]))]
        base, _ = map50([preds], gts)
        for _ in range(10):
            perm = rng.permutation(len(preds))
            shuffled, _ = map50([[preds[i] for i in perm]], gts)
            assert shuffled == base

    def test_vacuous_class_skipped(self):
        # predictions for class 3 but no class-3 ground truth: class skipped
        gts = [(np.array([[0.5, 0.5, 0.2, 0.2]]), np.array([0]))]
        preds = [[((0.5, 0.5, 0.2, 0.2), 0, 0.9), ((0.2, 0.2, 0.1, 0.1), 3, 0.8)]]
        value, per_class = map50(preds, gts)
        assert set(per_class) == {0}
        assert value == 1.0


class TestDice:
    def test_identical(self, rng):
        m = rng.random((8, 8)) > 0.5
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0] = True
        b[3, 3] = True
        assert dice(a, b) == 0.0

    def test_half_overlap_formula(self):
        a = np.zeros((20, 20), dtype=bool)
        b = np.zeros((20, 20), dtype=bool)
        a.reshape(-1)[:100] = True
        b.reshape(-1)[50:150] = True
        assert dice(a, b) == 0.5

    def test_both_empty_convention(self):
        z = np.zeros((4, 4), dtype=bool)
        assert dice(z, z) == 1.0

    def test_symmetry_and_monotonicity(self, rng):
        a = np.zeros((10, 10), dtype=bool)
        a.reshape(-1)[:30] = True
        prev = -1.0
        for overlap in (0, 10, 20, 30):
            b = np.zeros((10, 10), dtype=bool)
            b.reshape(-1)[30 - overlap: 60 - overlap] = True
            d = dice(a, b)
            assert d == dice(b, a)
            assert d > prev
            prev = d

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice(np.zeros((3, 3), dtype=bool), np.zeros((4, 4), dtype=bool))


class TestF1Macro:
    def test_perfect(self):
        value, _ = f1_macro([0, 1, 2], [0, 1, 2], classes=range(3))
        assert value == 1.0

    def test_all_wrong_binary(self):
        value, _ = f1_macro([1, 0, 1, 0], [0, 1, 0, 1], classes=range(2))
        assert value == 0.0

    def test_confusion_matrix_oracle(self):
        gt = [0, 0, 1, 1, 2, 2]
        pred = [0, 1, 1, 1, 2, 0]
        value, per_class = f1_macro(pred, gt, classes=range(3))
        # class 0: tp=1 fp=1 fn=1; class 1: tp=2 fp=1 fn=0; class 2: tp=1 fp=0 fn=1
        expected = {0: 2 * 1 / (2 * 1 + 1 + 1), 1: 2 * 2 / (2 * 2 + 1 + 0),
                    2: 2 * 1 / (2 * 1 + 0 + 1)}
        for cls, f1 in expected.items():
            assert abs(per_class[cls] - f1) <= 1e-12
        assert abs(value - np.mean(list(expected.values()))) <= 1e-9

    def test_absent_class_rules(self):
        # class 2 predicted but absent -> scores 0; class 3 absent everywhere -> skipped
        value, per_class = f1_macro([0, 2], [0, 1], classes=range(4))
        assert per_class[2] == 0.0
        assert 3 not in per_class


class TestBleu4:
    def test_identical(self):
        tokens = "the cell has a dark nucleus".split()
        assert abs(bleu4(tokens, tokens) - 1.0) <= 1e-12

    def test_empty_candidate(self):
        assert bleu4([], "a b c d".split()) == 0.0

    def test_hand_computed_smoothed_value(self):
        ref = "the cell has a dark nucleus".split()
        cand = "the cell has dark nucleus".split()
        p1 = 5 / 5
        p2 = 3 / 4
        p3 = 1 / 3
        p4 = 1 / (2 + 1)  # zero 4-gram matches, add-one smoothed
        bp = math.exp(1 - 6 / 5)
        expected = bp * (p1 * p2 * p3 * p4) ** 0.25
        assert abs(bleu4(cand, ref) - expected) <= 1e-9

    def test_token_renaming_invariance(self, rng):
        ref = "a b c d e f g".split()
        cand = "a b c e f g".split()
        mapping = {t: f"tok{i}" for i, t in enumerate("abcdefg")}
        renamed_ref = [mapping[t] for t in ref]
        renamed_cand = [mapping[t] for t in cand]
        assert abs(bleu4(cand, ref) - bleu4(renamed_cand, renamed_ref)) <= 1e-12


class TestExactMatch:
    def test_identical(self):
        assert exact_match("dark nucleus", "dark nucleus") == 1

    def test_case_sensitive(self):
        assert exact_match("Dark", "dark") == 0

    def test_whitespace_normalized(self):
        assert exact_match("  dark   nucleus ", "dark nucleus") == 1


class TestAveragePrecision:
    def test_empty(self):
        assert average_precision([], 0) == 0.0

    def test_matches_enumeration_on_random_flag_strings(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 12))
            flags = [bool(b) for b in rng.integers(0, 2, size=n)]
            num_gt = max(1, sum(flags) + int(rng.integers(0, 3)))
            assert abs(average_precision(flags, num_gt)
                       - enumeration_ap(flags, num_gt)) <= 1e-12
