import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from benet.errors import InputError, UndefinedMetricError
from benet.metrics import accuracy, apcer_bpcer, auc, evaluate

from oracles import auc_pairwise


def two_class(draw_labels):
    return draw_labels.filter(lambda y: 0 < sum(y) < len(y))


labels_st = two_class(st.lists(st.integers(0, 1), min_size=2, max_size=60))


class TestAccuracy:
    def test_identity(self):
        assert accuracy([0, 1, 1], [0, 1, 1]) == 1.0

    def test_inverted(self):
        y = np.array([0, 1, 1, 0])
        assert accuracy(y, 1 - y) == 0.0

    def test_count(self):
        assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75

    @pytest.mark.parametrize("a,b", [([], []), ([0, 1], [0])])
    def test_bad_input(self, a, b):
        with pytest.raises(InputError):
            accuracy(a, b)

    def test_bad_labels(self):
        with pytest.raises(InputError):
            accuracy([0, 2], [0, 1])


class TestAUC:
    def test_separated(self):
        assert auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_all_ties(self):
        assert auc([0, 1, 0, 1, 1], [0.4] * 5) == 0.5

    def test_small_case(self):
        assert auc([0, 0, 1, 1], [0.1, 0.6, 0.5, 0.9]) == 0.75

    @pytest.mark.parametrize("y", [[0, 0, 0], [1, 1]])
    def test_single_class(self, y):
        with pytest.raises(UndefinedMetricError):
            auc(y, np.zeros(len(y)))

    @settings(max_examples=100, deadline=None)
    @given(y=labels_st, data=st.data())
    def test_matches_pairwise(self, y, data):
        # small integer grid forces plenty of ties
        scores = data.draw(st.lists(st.integers(0, 6), min_size=len(y), max_size=len(y)))
        assert auc(y, scores) == auc_pairwise(y, scores)

    @settings(max_examples=50, deadline=None)
    @given(y=labels_st, data=st.data())
    def test_monotone_transform_and_flip(self, y, data):
        # coarse grid so the transforms stay strictly increasing in float64
        s = np.asarray(data.draw(st.lists(st.integers(-24, 24), min_size=len(y), max_size=len(y)))) / 8
        a = auc(y, s)
        assert auc(y, np.exp(s)) == pytest.approx(a, abs=1e-12)
        assert auc(y, 2 * s + 7) == pytest.approx(a, abs=1e-12)
        assert auc(y, -s) == pytest.approx(1 - a, abs=1e-12)


class TestErrorRates:
    def test_all_correct(self):
        assert apcer_bpcer([0, 1, 1], [0, 1, 1]) == (0.0, 0.0)

    def test_all_fakes_missed(self):
        assert apcer_bpcer([0, 0, 1, 1], [0, 0, 0, 0]) == (1.0, 0.0)

    def test_counts(self):
        y = [1, 1, 1, 1, 0, 0, 0, 0, 0]
        p = [1, 0, 1, 1, 1, 1, 0, 0, 0]
        apcer, bpcer = apcer_bpcer(y, p)
        assert apcer == 0.25 and bpcer == pytest.approx(0.4)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            apcer_bpcer([1, 1], [1, 0])

    @settings(max_examples=50, deadline=None)
    @given(y=labels_st, data=st.data())
    def test_accuracy_identity(self, y, data):
        p = data.draw(st.lists(st.integers(0, 1), min_size=len(y), max_size=len(y)))
        apcer, bpcer = apcer_bpcer(y, p)
        n_fake = sum(y)
        n_real = len(y) - n_fake
        expect = 1 - (apcer * n_fake + bpcer * n_real) / len(y)
        assert accuracy(y, p) == pytest.approx(expect, abs=1e-12)


def test_evaluate_report():
    y = [0, 0, 1, 1]
    report = evaluate(y, [0.1, 0.6, 0.5, 1.0], [0, 1, 0, 1], ["classifier"] * 3 + ["rejected"], threshold=0.2)
    d = report.to_json_dict(seed=3, split="test")
    assert d["acc"] == 0.5 and d["auc"] == 0.75
    assert (d["apcer"], d["bpcer"]) == (0.5, 0.5)
    assert (d["n_real"], d["n_fake"]) == (2, 2)
    assert d["route_counts"] == {"classifier": 3, "rejected": 1}
    assert d["threshold_used"] == 0.2 and d["seed"] == 3
