import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from badfu.data import Dataset, TriggerSpec
from badfu.errors import EvaluationError
from badfu.evaluate import (NCOptions, NCReport, Evaluator, accuracy, anomaly_indices, attack_success_rate,
                            neural_cleanse, reverse_trigger)
from badfu.nn import Architecture, ParamVector


def linear_model(W, b):
    W = np.asarray(W, dtype=float)
    return ParamVector.pack([(W, np.asarray(b, dtype=float))], Architecture(W.shape))


def constant_model(d, C, cls):
    b = np.zeros(C)
    b[cls] = 1.0
    return linear_model(np.zeros((d, C)), b)


class TestAccuracy:
    def test_constant_predictor(self):
        ds = Dataset(np.arange(6), np.random.default_rng(0).uniform(size=(6, 4)), np.zeros(6), 3)
        assert accuracy(constant_model(4, 3, 0), ds) == 1.0

    def test_three_of_four(self):
        # logits = x, so prediction is the argmax feature
        ds = Dataset(np.arange(4), np.eye(3)[[0, 1, 2, 2]], [0, 1, 2, 0], 3)
        assert accuracy(linear_model(np.eye(3), np.zeros(3)), ds) == 0.75

    def test_duplication_invariant(self):
        rng = np.random.default_rng(1)
        ds = Dataset(np.arange(10), rng.uniform(size=(10, 3)), rng.integers(0, 3, 10), 3)
        dup = Dataset.concat([ds, Dataset(ds.ids + 10, ds.features, ds.labels, 3)])
        m = linear_model(rng.normal(size=(3, 3)), np.zeros(3))
        assert accuracy(m, ds) == accuracy(m, dup)

    def test_empty(self):
        with pytest.raises(EvaluationError):
            accuracy(constant_model(2, 2, 0), Dataset(np.arange(0), np.zeros((0, 2)), np.zeros(0), 2))


class TestASR:
    t = TriggerSpec(target_label=0, patch_size=1, corner="bottom_right")

    def test_always_and_never_target(self):
        rng = np.random.default_rng(2)
        ds = Dataset(np.arange(8), rng.uniform(size=(8, 4)), [0, 1, 2, 1, 2, 0, 1, 2], 3, image_shape=(2, 2))
        assert attack_success_rate(constant_model(4, 3, 0), ds, self.t) == 1.0
        assert attack_success_rate(constant_model(4, 3, 1), ds, self.t) == 0.0

    def test_rigged_linear_model(self):
        # target logit 5*x3 - 10*x0, class-1 logit 1: the trigger (x3 = 1) wins only where x0 = 0
        x = np.zeros((5, 4))
        x[[0, 1, 2], 0] = 1.0
        ds = Dataset(np.arange(5), x, [1] * 5, 2, image_shape=(2, 2))
        W = np.zeros((4, 2))
        W[3, 0], W[0, 0] = 5.0, -10.0
        model = linear_model(W, [0.0, 1.0])
        assert attack_success_rate(model, ds, self.t) == pytest.approx(0.4)
        assert accuracy(model, ds) == 1.0

    def test_excludes_target_class(self):
        ds = Dataset(np.arange(2), np.zeros((2, 4)), [0, 0], 2, image_shape=(2, 2))
        with pytest.raises(EvaluationError):
            attack_success_rate(constant_model(4, 2, 0), ds, self.t)

    def test_evaluator_report(self):
        ds = Dataset(np.arange(4), np.zeros((4, 4)), [0, 1, 1, 1], 2, image_shape=(2, 2))
        rep = Evaluator(ds, self.t).report(constant_model(4, 2, 1), "pre_activate")
        assert (rep.acc, rep.asr, rep.n_test, rep.n_asr_eval) == (0.75, 0.0, 4, 3)


class TestNeuralCleanse:
    def test_uniform_model_flags_nothing(self):
        rng = np.random.default_rng(3)
        probe = Dataset(np.arange(9), rng.uniform(size=(9, 16)), np.arange(9) % 3, 3)
        arch = Architecture((16, 4, 3))
        report = neural_cleanse(ParamVector(np.zeros(arch.n_params), arch), probe, NCOptions(steps=20))
        assert report.flagged == [] and len(report.l1_norms) == 3
        assert np.allclose(report.l1_norms, report.l1_norms[0])

    def test_mask_and_pattern_stay_in_box(self):
        rng = np.random.default_rng(4)
        model = linear_model(rng.normal(size=(9, 3)) * 5, np.zeros(3))
        mask, pattern, _ = reverse_trigger(model, rng.uniform(size=(6, 9)), 1, NCOptions(steps=50, lr=0.5))
        assert mask.min() >= 0 and mask.max() <= 1 and pattern.min() >= 0 and pattern.max() <= 1

    def test_report_rows(self):
        rep = NCReport([1.0, 2.0, 3.0], [-2.5, 0.0, None])
        assert rep.flagged == [0]
        assert [r["flagged"] for r in rep.rows()] == [True, False, False]

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.1, 500), min_size=2, max_size=12))
    def test_indices_are_centred(self, norms):
        idx = anomaly_indices(np.array(norms))
        assert abs(np.median(idx)) < 1e-9 and np.all(np.isfinite(idx))
