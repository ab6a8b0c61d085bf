"""Objective terms: hand-computed values, empty-class policy, and the
geometric invariants of the center loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loravit import autograd as ag
from loravit.autograd import Tape, Tensor, finite_diff_grad, gradient_relative_error
from loravit.errors import ContractError, EmptyClassError
from loravit.losses import (LabeledBatch, LossConfig, SclCounters, center_distances,
                            combined_loss, cross_entropy, real_center, scl)


def make_batch(features, predictions, labels, dtype=np.float64):
    return LabeledBatch(
        Tensor(np.asarray(features, dtype=dtype)),
        Tensor(np.asarray(predictions, dtype=dtype)),
        np.asarray(labels),
    )


# the worked center-loss example: reals at (0,0),(2,0) so C=(1,0) and
# d_real=1; fakes at (5,0),(7,0) so d_fake=5
def hand_batch(fakes=((5.0, 0.0), (7.0, 0.0))):
    feats = [(0.0, 0.0), (2.0, 0.0)] + [tuple(f) for f in fakes]
    preds = [0.9, 0.8] + [0.2] * len(fakes)
    labels = [1, 1] + [0] * len(fakes)
    return make_batch(feats, preds, labels)


class TestCrossEntropy:
    def test_perfect_predictions_near_zero(self):
        batch = make_batch(np.zeros((2, 3)), [1.0, 0.0], [1, 0])
        assert cross_entropy(batch).item() < 1e-6

    def test_uniform_prediction_is_ln2(self):
        batch = make_batch(np.zeros((4, 2)), [0.5] * 4, [1, 0, 1, 0])
        assert cross_entropy(batch).item() == pytest.approx(math.log(2.0), abs=1e-6)

    def test_hand_value(self):
        batch = make_batch(np.zeros((2, 2)), [0.9, 0.2], [1, 0])
        expected = -0.5 * (math.log(0.9) + math.log(0.8))
        assert cross_entropy(batch).item() == pytest.approx(expected, abs=1e-9)
        assert cross_entropy(batch).item() == pytest.approx(0.164252, abs=1e-5)

    def test_empty_batch_rejected(self):
        batch = make_batch(np.zeros((0, 2)), [], [])
        with pytest.raises(ContractError):
            cross_entropy(batch)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        preds = rng.uniform(0.05, 0.95, 8)
        labels = rng.integers(0, 2, 8)
        batch = make_batch(np.zeros((8, 2)), preds, labels)
        perm = rng.permutation(8)
        shuffled = make_batch(np.zeros((8, 2)), preds[perm], labels[perm])
        assert cross_entropy(batch).item() == pytest.approx(
            cross_entropy(shuffled).item(), abs=1e-12)


class TestRealCenter:
    def test_singleton_is_own_feature(self):
        batch = make_batch([(3.0, 4.0), (9.0, 9.0)], [0.9, 0.1], [1, 0])
        np.testing.assert_array_equal(real_center(batch).data, [3.0, 4.0])

    def test_two_point_mean(self):
        batch = hand_batch()
        np.testing.assert_allclose(real_center(batch).data, [1.0, 0.0])

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(11)
        feats = rng.standard_normal((5, 7))
        batch = make_batch(feats, [0.5] * 5, [1] * 5)
        center = real_center(batch).data
        for j in range(7):
            acc = 0.0
            for i in range(5):
                acc += feats[i, j]
            assert abs(center[j] - acc / 5.0) < 1e-7

    def test_no_reals_signals_empty_class(self):
        batch = make_batch(np.ones((2, 2)), [0.1, 0.2], [0, 0])
        with pytest.raises(EmptyClassError):
            real_center(batch)

    def test_center_is_detached(self):
        feats = Tensor(np.ones((2, 2)), dtype=np.float64, requires_grad=True)
        batch = LabeledBatch(feats, Tensor(np.array([0.5, 0.5])), np.array([1, 0]))
        with Tape() as tape:
            c = real_center(batch)
        assert c.tape_id is None and not c.requires_grad
        assert tape.nodes == []


class TestScl:
    def test_hand_case_margin_one(self):
        val = scl(hand_batch(), LossConfig(margin=1.0))
        assert val.item() == pytest.approx(1.0, abs=1e-6)

    def test_hand_case_fake_at_center(self):
        val = scl(hand_batch(fakes=((1.0, 0.0),)), LossConfig(margin=1.0))
        assert val.item() == pytest.approx(3.0, abs=1e-6)

    def test_zero_when_reals_collapse_and_fakes_far(self):
        batch = make_batch([(1.0, 0.0), (1.0, 0.0), (9.0, 0.0)], [0.9, 0.9, 0.1], [1, 1, 0])
        assert scl(batch, LossConfig(margin=2.0)).item() == pytest.approx(0.0, abs=1e-9)

    def test_missing_class_skips_and_counts(self):
        counters = SclCounters()
        batch = make_batch(np.ones((2, 2)), [0.9, 0.8], [1, 1])
        val = scl(batch, LossConfig(), counters)
        assert val.item() == 0.0
        assert counters.skipped == 1

    def test_non_negative(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 10))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            batch = make_batch(rng.standard_normal((n, 4)), rng.uniform(0.1, 0.9, n), labels)
            assert scl(batch, LossConfig(margin=float(rng.uniform(0, 3)))).item() >= 0.0

    def test_translation_invariant(self):
        rng = np.random.default_rng(6)
        feats = rng.standard_normal((6, 3))
        labels = np.array([1, 1, 1, 0, 0, 0])
        preds = rng.uniform(0.1, 0.9, 6)
        base = scl(make_batch(feats, preds, labels), LossConfig()).item()
        shifted = scl(make_batch(feats + np.array([5.0, -3.0, 2.0]), preds, labels),
                      LossConfig()).item()
        assert shifted == pytest.approx(base, rel=1e-9)

    def test_within_class_permutation_invariant(self):
        rng = np.random.default_rng(7)
        feats = rng.standard_normal((6, 3))
        labels = np.array([1, 1, 1, 0, 0, 0])
        preds = rng.uniform(0.1, 0.9, 6)
        base = scl(make_batch(feats, preds, labels), LossConfig()).item()
        perm = np.array([2, 0, 1, 5, 3, 4])  # permutes within each class
        again = scl(make_batch(feats[perm], preds[perm], labels[perm]), LossConfig()).item()
        assert again == pytest.approx(base, abs=1e-12)

    @given(st.floats(1.05, 4.0), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_pushing_fakes_radially_away_never_increases(self, factor, seed):
        rng = np.random.default_rng(seed)
        reals = rng.standard_normal((4, 3))
        center = reals.mean(axis=0)
        fakes = rng.standard_normal((3, 3))
        cfg = LossConfig(margin=float(rng.uniform(0.0, 2.0)))
        preds = [0.5] * 7
        labels = [1] * 4 + [0] * 3
        near = scl(make_batch(np.vstack([reals, fakes]), preds, labels), cfg).item()
        moved = center + factor * (fakes - center)
        far = scl(make_batch(np.vstack([reals, moved]), preds, labels), cfg).item()
        assert far <= near + 1e-9

    def test_distance_homogeneity_in_feature_scale(self):
        rng = np.random.default_rng(8)
        feats = rng.standard_normal((6, 4))
        labels = np.array([1, 1, 0, 0, 1, 0])
        batch = make_batch(feats, [0.5] * 6, labels)
        d_real, d_fake = center_distances(batch)
        scaled = make_batch(feats * 3.0, [0.5] * 6, labels)
        d_real3, d_fake3 = center_distances(scaled)
        assert d_real3.item() == pytest.approx(3.0 * d_real.item(), rel=1e-9)
        assert d_fake3.item() == pytest.approx(3.0 * d_fake.item(), rel=1e-9)

    def test_gradient_step_on_scl_decreases_d_real(self):
        # active-hinge regime: margin large enough that the hinge binds
        cfg = LossConfig(margin=5.0)
        feats = Tensor(np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 0.0], [7.0, 0.0]]),
                       dtype=np.float64, requires_grad=True)
        batch = LabeledBatch(feats, Tensor(np.array([0.9, 0.8, 0.2, 0.1]), dtype=np.float64),
                             np.array([1, 1, 0, 0]))
        before = center_distances(batch)[0].item()
        with Tape() as tape:
            loss = scl(batch, cfg)
        tape.backward(loss)
        stepped = feats.data - 0.1 * feats.grad
        after_batch = LabeledBatch(Tensor(stepped), Tensor(np.array([0.9, 0.8, 0.2, 0.1]), dtype=np.float64),
                                   np.array([1, 1, 0, 0]))
        after = center_distances(after_batch)[0].item()
        assert after < before

    def test_fake_coincident_with_center_has_defined_gradient(self):
        feats = Tensor(np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0]]),
                       dtype=np.float64, requires_grad=True)
        batch = LabeledBatch(feats, Tensor(np.array([0.9, 0.8, 0.1]), dtype=np.float64),
                             np.array([1, 1, 0]))
        with Tape() as tape:
            loss = scl(batch, LossConfig(margin=1.0))
        tape.backward(loss)
        assert np.all(np.isfinite(feats.grad))
        np.testing.assert_array_equal(feats.grad[2], 0.0)  # sqrt grad at 0 is 0


class TestCombined:
    def test_zero_lambda_equals_cross_entropy_exactly(self):
        batch = hand_batch()
        assert combined_loss(batch, LossConfig(lam=0.0)).item() == cross_entropy(batch).item()

    def test_lambda_one_hand_case(self):
        batch = hand_batch()
        expected = cross_entropy(batch).item() + 1.0
        got = combined_loss(batch, LossConfig(lam=1.0, margin=1.0)).item()
        assert got == pytest.approx(expected, abs=1e-9)

    def test_gradient_wrt_features_matches_oracle(self):
        rng = np.random.default_rng(12)
        feats0 = rng.standard_normal((6, 4))
        preds = rng.uniform(0.2, 0.8, 6)
        labels = np.array([1, 0, 1, 0, 1, 0])
        cfg = LossConfig(lam=0.7, margin=1.5)
        frozen_center = Tensor(feats0[labels == 1].mean(axis=0))

        def loss_of(features_tensor):
            batch = LabeledBatch(features_tensor, Tensor(preds, dtype=np.float64), labels)
            return combined_loss(batch, cfg, center=frozen_center)

        feats = Tensor(feats0, dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            out = loss_of(feats)
        tape.backward(out)
        numeric = finite_diff_grad(loss_of, Tensor(feats0, dtype=np.float64), h=1e-5)
        assert gradient_relative_error(Tensor(feats.grad), numeric) < 1e-5

    def test_missing_class_still_yields_ce_plus_zero(self):
        counters = SclCounters()
        batch = make_batch(np.ones((2, 2)), [0.9, 0.8], [1, 1])
        got = combined_loss(batch, LossConfig(lam=0.5), counters)
        assert got.item() == pytest.approx(cross_entropy(batch).item(), abs=1e-12)
        assert counters.skipped == 1
