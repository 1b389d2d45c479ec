import numpy as np
import pytest

from skysense_mini.metrics import adjusted_rand_index, confusion_matrix, evaluate_predictions


class TestEvaluate:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2, 1, 0])
        m = evaluate_predictions(labels, labels)
        assert m.overall_accuracy == 1.0
        assert m.mean_iou == 1.0

    def test_hand_confusion_matrix(self):
        # truth-major confusion [[2, 1], [0, 3]]: OA 5/6, IoU 2/3 and 3/4
        labels = np.array([0, 0, 0, 1, 1, 1])
        preds = np.array([0, 0, 1, 1, 1, 1])
        m = evaluate_predictions(preds, labels)
        assert m.overall_accuracy == pytest.approx(5 / 6)
        assert m.per_class[0].iou == pytest.approx(2 / 3)
        assert m.per_class[1].iou == pytest.approx(3 / 4)
        assert m.mean_iou == pytest.approx((2 / 3 + 3 / 4) / 2)  # = 17/24
        assert m.mean_iou == pytest.approx(17 / 24)

    def test_all_one_class_on_balanced_data(self):
        labels = np.array([0, 1] * 10)
        preds = np.zeros(20, dtype=int)
        m = evaluate_predictions(preds, labels)
        assert m.overall_accuracy == pytest.approx(0.5)

    def test_absent_class_excluded_from_mean(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 0, 1, 1])
        m = evaluate_predictions(preds, labels, n_classes=5)
        assert len(m.per_class) == 2  # classes 2..4 never appear on either side
        assert m.mean_iou == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evaluate_predictions(np.array([]), np.array([]))

    def test_confusion_matrix_oracle(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, 100)
        preds = rng.integers(0, 4, 100)
        cm = confusion_matrix(preds, labels, 4)
        for t in range(4):
            for p in range(4):
                assert cm[t, p] == np.sum((labels == t) & (preds == p))


class TestARI:
    def test_identical_partitions(self):
        a = np.array([0, 0, 1, 1, 2, 2])
        assert adjusted_rand_index(a, a) == pytest.approx(1.0)

    def test_label_permutation_invariant(self):
        a = np.array([0, 0, 1, 1, 2, 2])
        b = np.array([2, 2, 0, 0, 1, 1])
        assert adjusted_rand_index(a, b) == pytest.approx(1.0)

    def test_single_cluster_vs_split_is_zero(self):
        a = np.zeros(10, dtype=int)
        b = np.arange(10)
        assert adjusted_rand_index(a, b) == pytest.approx(0.0)

    def test_matches_sklearn(self):
        from sklearn.metrics import adjusted_rand_score

        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.integers(0, 5, 60)
            b = rng.integers(0, 7, 60)
            assert adjusted_rand_index(a, b) == pytest.approx(
                adjusted_rand_score(a, b), abs=1e-12
            )

    def test_hand_value_from_contingency(self):
        # contingency [[2, 0], [1, 1]]: sum_cells C(2,2)=1, rows C(2,2)+C(2,2)=2,
        # cols C(3,2)+C(1,2)=3, pairs C(4,2)=6; expected=1, max=2.5
        a = np.array([0, 0, 1, 1])
        b = np.array([0, 0, 0, 1])
        expected = (1 - 2 * 3 / 6) / (0.5 * (2 + 3) - 2 * 3 / 6)
        assert adjusted_rand_index(a, b) == pytest.approx(expected)
