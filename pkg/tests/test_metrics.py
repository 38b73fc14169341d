"""Metric tests: Hungarian assignment against full permutation enumeration,
MCC exactness and invariances, R^2 oracles against closed-form regression,
and slot-object assignment from alpha maps."""

import itertools

import numpy as np
import pytest

from slotlab.errors import DegenerateSegmentation, InsufficientSamples, RankDeficient
from slotlab.metrics import (
    EvalBatch,
    assign_slots_to_objects,
    eval_report,
    hungarian,
    linear_disentanglement,
    mcc,
)


def brute_force_assignment(cost):
    """Enumerate all permutations; return (best cost, lexicographically
    smallest optimal permutation)."""
    n = cost.shape[0]
    best_cost, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        c = sum(cost[i, perm[i]] for i in range(n))
        if c < best_cost - 1e-12 or (abs(c - best_cost) <= 1e-12 and perm < best_perm):
            best_cost, best_perm = c, perm
    return best_cost, np.array(best_perm)


class TestHungarian:
    def test_matches_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(2, 6))
            cost = rng.normal(size=(n, n))
            assigned = hungarian(cost)
            best_cost, _ = brute_force_assignment(cost)
            assert cost[np.arange(n), assigned].sum() == pytest.approx(best_cost)
            assert sorted(assigned) == list(range(n))

    def test_lexicographic_among_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(2, 6))
            # integer costs produce frequent ties
            cost = rng.integers(0, 3, size=(n, n)).astype(float)
            assigned = hungarian(cost)
            _, expected = brute_force_assignment(cost)
            np.testing.assert_array_equal(assigned, expected)

    def test_identity_on_diagonal_advantage(self):
        cost = np.ones((3, 3)) - np.eye(3)
        np.testing.assert_array_equal(hungarian(cost), [0, 1, 2])

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros((2, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[0.0, np.inf], [1.0, 0.0]]))


class TestMCC:
    def test_perfect_permutation_scores_one(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(100, 3))
        score, perm = mcc(z, z[:, [2, 0, 1]])
        assert score == pytest.approx(1.0)
        np.testing.assert_array_equal(perm, [1, 2, 0])

    def test_sign_and_affine_invariance(self):
        """|Pearson| is invariant to per-dimension affine maps."""
        rng = np.random.default_rng(3)
        z = rng.normal(size=(200, 3))
        transformed = z * np.array([-2.0, 5.0, 0.3]) + np.array([1.0, -7.0, 0.0])
        score, perm = mcc(z, transformed)
        assert score == pytest.approx(1.0)
        np.testing.assert_array_equal(perm, [0, 1, 2])

    def test_independent_noise_scores_low(self):
        rng = np.random.default_rng(4)
        score, _ = mcc(rng.normal(size=(500, 3)), rng.normal(size=(500, 3)))
        assert score < 0.2

    def test_matches_manual_computation(self):
        """Oracle: tiny instance computed by hand via the correlation matrix
        and full permutation enumeration."""
        rng = np.random.default_rng(5)
        z_true = rng.normal(size=(50, 2))
        z_pred = np.stack([z_true[:, 1] + 0.3 * rng.normal(size=50),
                           z_true[:, 0] + 0.8 * rng.normal(size=50)], axis=1)
        corr = np.abs(np.corrcoef(z_true, z_pred, rowvar=False)[:2, 2:])
        expected = max(np.mean([corr[0, p[0]], corr[1, p[1]]])
                       for p in itertools.permutations(range(2)))
        score, _ = mcc(z_true, z_pred)
        assert score == pytest.approx(expected)

    def test_constant_prediction_contributes_zero(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(100, 2))
        z_pred = np.stack([z[:, 0], np.zeros(100)], axis=1)
        score, _ = mcc(z, z_pred)
        assert score == pytest.approx(0.5, abs=1e-9)

    def test_mixed_representation_bounded(self):
        """A representation that averages all true factors into every
        dimension cannot reach high MCC."""
        rng = np.random.default_rng(7)
        z = rng.normal(size=(500, 4))
        mixed = np.tile(z.mean(axis=1, keepdims=True), (1, 4))
        score, _ = mcc(z, mixed + 0.01 * rng.normal(size=(500, 4)))
        assert score < 0.6

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamples):
            mcc(np.zeros((3, 2)), np.zeros((3, 2)))


class TestLinearDisentanglement:
    def test_exact_linear_map_scores_one(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(100, 3))
        mixing = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        r2 = linear_disentanglement(z, z @ mixing + 0.5)
        assert r2 == pytest.approx(1.0, abs=1e-10)

    def test_matches_lstsq_oracle(self):
        """Independent oracle: R^2 via numpy lstsq residuals."""
        rng = np.random.default_rng(9)
        z_true = rng.normal(size=(80, 2))
        z_pred = rng.normal(size=(80, 4))
        design = np.concatenate([z_pred, np.ones((80, 1))], axis=1)
        coef, *_ = np.linalg.lstsq(design, z_true, rcond=None)
        resid = z_true - design @ coef
        ss_res = (resid**2).sum(axis=0)
        ss_tot = ((z_true - z_true.mean(axis=0)) ** 2).sum(axis=0)
        expected = float((1 - ss_res / ss_tot).mean())
        assert linear_disentanglement(z_true, z_pred) == pytest.approx(expected, abs=1e-9)

    def test_noise_scores_near_zero(self):
        rng = np.random.default_rng(10)
        r2 = linear_disentanglement(rng.normal(size=(2000, 2)), rng.normal(size=(2000, 2)))
        assert abs(r2) < 0.05

    def test_ridge_fallback_on_collinear_predictors(self):
        rng = np.random.default_rng(11)
        z_true = rng.normal(size=(50, 2))
        col = rng.normal(size=(50, 1))
        z_pred = np.concatenate([col, col], axis=1)  # rank 1
        r2, details = linear_disentanglement(z_true, z_pred, return_details=True)
        assert details["used_ridge"]
        assert np.isfinite(r2)

    def test_too_few_rows(self):
        with pytest.raises(RankDeficient):
            linear_disentanglement(np.zeros((3, 2)), np.zeros((3, 4)))


class TestSlotAssignment:
    def _alphas_from_segments(self, seg, m):
        """One-hot alpha maps from a hard segment map."""
        n = seg.size
        alphas = np.full((m, n), 1e-3)
        alphas[seg.ravel(), np.arange(n)] = 1.0
        return alphas / alphas.sum(axis=0)

    def test_perfect_segmentation(self):
        side, m, k = 8, 3, 2
        masks = np.zeros((k, side, side), dtype=bool)
        masks[0, 1:3, 1:3] = True
        masks[1, 5:7, 5:7] = True
        seg = np.full((side, side), 2)  # background slot 2
        seg[masks[0]] = 0
        seg[masks[1]] = 1
        alphas = self._alphas_from_segments(seg, m)
        mapping, background, ious = assign_slots_to_objects(alphas, masks)
        assert mapping == {0: 0, 1: 1}
        assert background == 2
        np.testing.assert_allclose(ious, [1.0, 1.0])

    def test_permuted_slots_still_assigned(self):
        side, m, k = 8, 3, 2
        masks = np.zeros((k, side, side), dtype=bool)
        masks[0, 1:3, 1:3] = True
        masks[1, 5:7, 5:7] = True
        seg = np.full((side, side), 0)
        seg[masks[0]] = 2
        seg[masks[1]] = 1
        alphas = self._alphas_from_segments(seg, m)
        mapping, background, _ = assign_slots_to_objects(alphas, masks)
        assert mapping == {0: 2, 1: 1}
        assert background == 0

    def test_partial_overlap_iou(self):
        side, m, k = 8, 2, 1
        masks = np.zeros((k, side, side), dtype=bool)
        masks[0, 0:2, 0:4] = True  # 8 pixels
        seg = np.zeros((side, side), dtype=int)
        seg[0:2, 0:2] = 1  # slot 1 covers half the object: IoU 4/8
        alphas = self._alphas_from_segments(seg, m)
        mapping, _, ious = assign_slots_to_objects(alphas, masks)
        assert mapping == {0: 1}
        assert ious[0] == pytest.approx(4 / 8)

    def test_unmatched_object_raises(self):
        """An object whose mask is empty can overlap no slot segment."""
        side, m, k = 8, 2, 2
        masks = np.zeros((k, side, side), dtype=bool)
        masks[0, 0:2, 0:2] = True  # object 1 stays empty
        alphas = np.zeros((m, side * side))
        alphas[0] = 1.0  # slot 0 owns every pixel
        with pytest.raises(DegenerateSegmentation):
            assign_slots_to_objects(alphas, masks)


class TestEvalReport:
    def test_report_fields(self):
        rng = np.random.default_rng(12)
        z = rng.normal(size=(200, 2))
        batch = EvalBatch(z_true=z, z_pred=z[:, ::-1] * 2.0,
                          assignment_diagnostics={"exclusion_rate": 0.1, "mean_iou": 0.9})
        report = eval_report(batch)
        assert report.mcc == pytest.approx(1.0)
        assert report.ld_r2 == pytest.approx(1.0)
        np.testing.assert_array_equal(report.permutation, [1, 0])
        np.testing.assert_allclose(report.per_property_correlation, [1.0, 1.0])
        assert report.exclusion_rate == 0.1
        assert report.mean_iou == 0.9
