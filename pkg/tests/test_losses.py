"""Loss-stack behavior: mining, hinge variants, neighbor selection, sosr,
analytic gradients, and the finite-difference checker."""

import math

import numpy as np
import pytest

import reference_impl as ref
from conftest import circle_points, random_batch, unit_rows
from sosd.core import PairBatch, l2_distance
from sosd.errors import NondifferentiablePointError, ValidationError
from sosd.losses import (
    CANDIDATE_KINDS,
    LossConfig,
    finite_difference_check,
    fos_loss,
    gradient_check_trials,
    hardest_negative,
    knn_select,
    random_unit_batch,
    sos_distance,
    sosr,
    total_loss,
)

QHT = LossConfig(margin=1.0, k=1, fos_variant="qht", sos_neighbor_mode="full_batch")
HT = LossConfig(margin=1.0, k=1, fos_variant="ht", sos_neighbor_mode="full_batch")


class TestHardestNegative:
    def test_worked_example_pair_0(self, spec_example_batch):
        got = hardest_negative(spec_example_batch, 0)
        # min candidate is d(y_0, x_1) = sqrt(0.36 + 0.04)
        assert got.d_neg == pytest.approx(math.sqrt(0.4), rel=1e-12)
        assert got.d_neg == pytest.approx(0.63246, abs=1e-5)
        assert got.j == 1
        assert got.kind == "positive-anchor"

    def test_worked_example_pair_1(self, spec_example_batch):
        got = hardest_negative(spec_example_batch, 1)
        assert got.d_neg == pytest.approx(math.sqrt(0.4), rel=1e-12)
        assert got.j == 0
        assert got.kind == "anchor-positive"

    def test_index_out_of_range(self, spec_example_batch):
        with pytest.raises(ValidationError):
            hardest_negative(spec_example_batch, 2)
        with pytest.raises(ValidationError):
            hardest_negative(spec_example_batch, -1)

    def test_tie_breaks_to_smallest_j_then_candidate_order(self):
        # anchors on one pole, positives mirrored: every candidate equals
        # the same chord, so pair 0 must report j=1 and the first kind
        batch = PairBatch(
            anchors=circle_points([0.0, 90.0, 180.0]),
            positives=circle_points([0.0, 90.0, 180.0]),
            labels=np.array([0, 1, 2]),
        )
        got = hardest_negative(batch, 0)
        assert got.j == 1
        assert got.kind == "anchor-anchor"

    def test_matches_reference_on_random_batches(self, rng):
        for _ in range(30):
            n = int(rng.integers(2, 9))
            q = int(rng.integers(2, 6))
            batch = random_batch(rng, n, q)
            a = batch.anchors.tolist()
            p = batch.positives.tolist()
            for i in range(n):
                got = hardest_negative(batch, i)
                d, j, kind_idx = ref.hardest_negative(a, p, i)
                assert got.d_neg == d
                assert got.j == j
                assert got.kind == CANDIDATE_KINDS[kind_idx]


class TestFosLoss:
    def test_worked_example_qht(self, spec_example_batch):
        expected = ((1.0 + math.sqrt(0.8) - math.sqrt(0.4)) ** 2 + 1.0) / 2.0
        got = fos_loss(spec_example_batch, QHT)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(1.29628, abs=1e-5)

    def test_worked_example_ht(self, spec_example_batch):
        expected = ((1.0 + math.sqrt(0.8) - math.sqrt(0.4)) + 1.0) / 2.0
        got = fos_loss(spec_example_batch, HT)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(1.13099, abs=1e-5)

    def test_qht_is_mean_of_squared_hinges(self, rng):
        for _ in range(20):
            batch = random_batch(rng, 6, 4)
            report = total_loss(batch, LossConfig(k=2), include_sos=False)
            hinges = [
                max(0.0, 1.0 + r.d_pos - r.d_neg) for r in report.per_pair
            ]
            qht = fos_loss(batch, LossConfig(k=2, fos_variant="qht"))
            ht = fos_loss(batch, LossConfig(k=2, fos_variant="ht"))
            assert qht == pytest.approx(
                sum(h * h for h in hinges) / len(hinges), rel=1e-12
            )
            assert ht == pytest.approx(sum(hinges) / len(hinges), rel=1e-12)

    def test_inactive_hinge_gives_zero(self):
        # identical anchors and positives on orthogonal axes: d_pos = 0,
        # every negative is sqrt(2) > margin, so no residual is active
        pts = circle_points([0.0, 90.0])
        batch = PairBatch(anchors=pts, positives=pts.copy(), labels=np.array([0, 1]))
        assert fos_loss(batch, QHT) == 0.0
        assert fos_loss(batch, HT) == 0.0
        report = total_loss(batch, LossConfig(k=1))
        assert report.fos_loss == 0.0
        assert report.sos_loss == 0.0
        assert report.total_loss == 0.0
        assert np.all(report.grad_anchors == 0.0)
        assert np.all(report.grad_positives == 0.0)
        assert np.all(np.isfinite(report.grad_anchors))

    def test_matches_reference(self, rng):
        for _ in range(30):
            n = int(rng.integers(2, 10))
            batch = random_batch(rng, n, 3)
            a, p = batch.anchors.tolist(), batch.positives.tolist()
            for variant in ("qht", "ht"):
                got = fos_loss(batch, LossConfig(k=1, fos_variant=variant))
                want = ref.fos_loss(a, p, 1.0, variant)
                assert math.isclose(got, want, rel_tol=1e-10, abs_tol=1e-12)


class TestKnnSelect:
    def test_circle_single_neighbor(self):
        # anchors and positives both at 0, 10, 90 degrees: the single
        # nearest of each side of pair 1 is pair 2
        pts = circle_points([0.0, 10.0, 90.0])
        batch = PairBatch(
            anchors=pts, positives=pts.copy(), labels=np.array([1, 2, 3])
        )
        assert knn_select(batch, 0, 1) == {2}

    def test_circle_sides_agreeing(self):
        # positive side at 0, 80, 90: the positive of pair 2 (80 deg,
        # chord 2 sin 40) is still nearer to pair 1 than pair 3's
        # (90 deg, chord 2 sin 45), so both sides pick pair 2
        batch = PairBatch(
            anchors=circle_points([0.0, 10.0, 90.0]),
            positives=circle_points([0.0, 80.0, 90.0]),
            labels=np.array([1, 2, 3]),
        )
        assert knn_select(batch, 0, 1) == {2}
        a, p = batch.anchors.tolist(), batch.positives.tolist()
        assert ref.knn_select(a, p, [1, 2, 3], 0, 1) == {2}

    def test_circle_sides_disagreeing(self):
        # pushing pair 2's positive out to 100 deg flips the positive-side
        # vote to pair 3, giving the union its maximum size 2k
        batch = PairBatch(
            anchors=circle_points([0.0, 10.0, 90.0]),
            positives=circle_points([0.0, 100.0, 90.0]),
            labels=np.array([1, 2, 3]),
        )
        assert knn_select(batch, 0, 1) == {2, 3}

    def test_k_equals_n_minus_1_selects_everyone(self, rng):
        batch = random_batch(rng, 7, 4)
        assert knn_select(batch, 3, 6) == {0, 1, 2, 4, 5, 6}

    def test_cardinality_bounds(self, rng):
        for _ in range(100):
            n = int(rng.integers(3, 13))
            k = int(rng.integers(1, n))
            batch = random_batch(rng, n, int(rng.integers(2, 6)))
            for i in range(n):
                c = knn_select(batch, i, k)
                assert k <= len(c) <= 2 * k
                assert int(batch.labels[i]) not in c

    def test_matches_reference(self, rng):
        for _ in range(30):
            n = int(rng.integers(3, 9))
            k = int(rng.integers(1, n))
            batch = random_batch(rng, n, 3)
            a, p = batch.anchors.tolist(), batch.positives.tolist()
            labels = batch.labels.tolist()
            for i in range(n):
                assert knn_select(batch, i, k) == ref.knn_select(a, p, labels, i, k)

    def test_k_out_of_range(self, rng):
        batch = random_batch(rng, 4, 3)
        with pytest.raises(ValidationError):
            knn_select(batch, 0, 0)
        with pytest.raises(ValidationError):
            knn_select(batch, 0, 4)


class TestSecondOrder:
    def test_worked_example_full_batch(self, spec_example_batch):
        expected = abs(math.sqrt(2.0) - 1.2)
        cfg = LossConfig(k=1, sos_neighbor_mode="full_batch")
        assert sos_distance(spec_example_batch, 0, cfg) == pytest.approx(
            expected, rel=1e-12
        )
        assert sosr(spec_example_batch, cfg) == pytest.approx(expected, rel=1e-12)
        assert sosr(spec_example_batch, cfg) == pytest.approx(0.21421, abs=1e-5)

    def test_same_side_with_max_k_equals_full_batch(self, rng):
        for _ in range(10):
            n = int(rng.integers(3, 9))
            batch = random_batch(rng, n, 5)
            same = LossConfig(k=n - 1, sos_neighbor_mode="same_side")
            full = LossConfig(k=n - 1, sos_neighbor_mode="full_batch")
            assert sosr(batch, same) == sosr(batch, full)

    def test_reflected_positives_give_zero(self, rng):
        # coordinate sign flip preserves every squared term in the same
        # order, so the two distance profiles agree bit for bit
        anchors = unit_rows(rng, 6, 4)
        positives = anchors * np.array([1.0, -1.0, 1.0, -1.0])
        batch = PairBatch(anchors=anchors, positives=positives, labels=np.arange(6))
        assert sosr(batch, LossConfig(k=2)) == 0.0
        assert sosr(batch, LossConfig(k=2, sos_neighbor_mode="full_batch")) == 0.0

    def test_orthogonal_transform_invariance(self, rng):
        batch = random_batch(rng, 8, 6)
        rot, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        rotated = PairBatch(
            anchors=batch.anchors @ rot,
            positives=batch.positives @ rot,
            labels=batch.labels,
        )
        cfg = LossConfig(k=3)
        assert sosr(rotated, cfg) == pytest.approx(sosr(batch, cfg), rel=1e-9)
        r0 = total_loss(batch, cfg)
        r1 = total_loss(rotated, cfg)
        assert r1.total_loss == pytest.approx(r0.total_loss, rel=1e-9)

    def test_matches_reference_both_modes(self, rng):
        for _ in range(30):
            n = int(rng.integers(3, 9))
            k = int(rng.integers(1, n))
            batch = random_batch(rng, n, 3)
            a, p = batch.anchors.tolist(), batch.positives.tolist()
            labels = batch.labels.tolist()
            for mode in ("same_side", "full_batch"):
                cfg = LossConfig(k=k, sos_neighbor_mode=mode)
                for i in range(n):
                    got = sos_distance(batch, i, cfg)
                    want = ref.sos_distance(a, p, labels, i, k, mode)
                    assert math.isclose(got, want, rel_tol=1e-10, abs_tol=1e-12)
                assert math.isclose(
                    sosr(batch, cfg),
                    ref.sosr(a, p, labels, k, mode),
                    rel_tol=1e-10,
                    abs_tol=1e-12,
                )


class TestTotalLoss:
    def test_worked_example_total(self, spec_example_batch):
        report = total_loss(spec_example_batch, QHT)
        fos = ((1.0 + math.sqrt(0.8) - math.sqrt(0.4)) ** 2 + 1.0) / 2.0
        sos = abs(math.sqrt(2.0) - 1.2)
        assert report.fos_loss == pytest.approx(fos, rel=1e-12)
        assert report.sos_loss == pytest.approx(sos, rel=1e-12)
        assert report.total_loss == pytest.approx(1.51049, abs=1e-5)
        assert report.total_loss == report.fos_loss + report.sos_loss

    def test_per_pair_records(self, spec_example_batch):
        report = total_loss(spec_example_batch, QHT)
        assert len(report.per_pair) == 2
        rec = report.per_pair[0]
        assert rec.d_pos == pytest.approx(math.sqrt(0.8), rel=1e-12)
        assert rec.d_neg == pytest.approx(math.sqrt(0.4), rel=1e-12)
        assert rec.neg_j == 1
        assert rec.neg_label == 1
        assert rec.neg_kind == "positive-anchor"
        assert rec.neighbors == (1,)

    def test_exclude_sos(self, rng):
        batch = random_batch(rng, 5, 4)
        report = total_loss(batch, LossConfig(k=2), include_sos=False)
        assert report.sos_loss == 0.0
        assert report.total_loss == report.fos_loss
        assert all(r.neighbors == () for r in report.per_pair)

    def test_grad_shapes_and_dtype(self, rng):
        batch = random_batch(rng, 5, 7)
        report = total_loss(batch, LossConfig(k=2))
        assert report.grad_anchors.shape == (5, 7)
        assert report.grad_positives.shape == (5, 7)
        assert report.grad_anchors.dtype == np.float64

    def test_k_too_large_rejected(self, rng):
        batch = random_batch(rng, 4, 3)
        with pytest.raises(ValidationError):
            total_loss(batch, LossConfig(k=4))

    def test_coincident_pair_stays_finite(self):
        # d_pos = 0 for pair 0: value and gradients must not produce NaN
        anchors = circle_points([0.0, 50.0, 130.0])
        positives = circle_points([0.0, 60.0, 120.0])
        batch = PairBatch(anchors=anchors, positives=positives, labels=np.arange(3))
        report = total_loss(batch, LossConfig(k=1))
        assert np.all(np.isfinite(report.grad_anchors))
        assert np.all(np.isfinite(report.grad_positives))
        assert math.isfinite(report.total_loss)

    def test_matches_reference(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 10))
            k = int(rng.integers(1, n))
            batch = random_batch(rng, n, int(rng.integers(2, 9)))
            a, p = batch.anchors.tolist(), batch.positives.tolist()
            labels = batch.labels.tolist()
            for variant in ("qht", "ht"):
                for mode in ("same_side", "full_batch"):
                    cfg = LossConfig(k=k, fos_variant=variant, sos_neighbor_mode=mode)
                    got = total_loss(batch, cfg).total_loss
                    want = ref.total_loss(a, p, labels, 1.0, k, variant, mode)
                    assert math.isclose(got, want, rel_tol=1e-10, abs_tol=1e-12)


class TestLossConfigValidation:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.margin == 1.0
        assert cfg.k == 8
        assert cfg.fos_variant == "qht"
        assert cfg.sos_neighbor_mode == "same_side"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"margin": -0.1},
            {"k": 0},
            {"fos_variant": "squared"},
            {"sos_neighbor_mode": "all"},
            {"distance_epsilon": 0.0},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ValidationError):
            LossConfig(**kwargs)


class TestFiniteDifference:
    def test_smooth_batch_small_error(self):
        batch = random_batch(np.random.default_rng(0), 6, 8)
        err = finite_difference_check(batch, LossConfig(k=2))
        assert err < 1e-4

    def test_argmin_tie_detected(self):
        batch = PairBatch(
            anchors=np.array([[1.0, 0.0], [-1.0, 0.0]]),
            positives=np.array([[0.0, 1.0], [0.0, -1.0]]),
            labels=np.array([0, 1]),
        )
        with pytest.raises(NondifferentiablePointError, match="negative argmin tie"):
            finite_difference_check(batch, LossConfig(k=1))

    def test_hinge_boundary_detected(self):
        anchors = circle_points([0.0, 90.0])
        positives = circle_points([5.0, 97.0])
        batch = PairBatch(anchors=anchors, positives=positives, labels=np.array([0, 1]))
        d_neg = l2_distance(positives[0], anchors[1])
        d_pos = l2_distance(anchors[0], positives[0])
        cfg = LossConfig(margin=d_neg - d_pos, k=1)
        with pytest.raises(NondifferentiablePointError, match="hinge boundary"):
            finite_difference_check(batch, cfg)

    def test_degenerate_distance_detected(self):
        # the two anchors nearly coincide, so d_neg ~ 1e-4 < tolerance
        anchors = np.array(
            [[1.0, 0.0], [math.cos(1e-4), math.sin(1e-4)]]
        )
        positives = circle_points([90.0, 160.0])
        batch = PairBatch(anchors=anchors, positives=positives, labels=np.array([0, 1]))
        with pytest.raises(NondifferentiablePointError, match="degenerate distance"):
            finite_difference_check(batch, LossConfig(k=1), include_sos=False)

    def test_zero_gradient_region_gives_zero_error(self, rng):
        # margin 0 and positives hugging their anchors: no hinge is active,
        # the first-order loss is identically 0 around the point
        anchors = unit_rows(rng, 4, 16)
        positives = anchors + 0.05 * rng.standard_normal((4, 16))
        positives /= np.linalg.norm(positives, axis=1, keepdims=True)
        batch = PairBatch(anchors=anchors, positives=positives, labels=np.arange(4))
        cfg = LossConfig(margin=0.0, k=1)
        err = finite_difference_check(batch, cfg, include_sos=False)
        assert err == 0.0

    def test_bad_step_rejected(self, rng):
        batch = random_batch(rng, 4, 3)
        with pytest.raises(ValidationError):
            finite_difference_check(batch, LossConfig(k=1), h=0.0)

    def test_trials_runner(self):
        results = gradient_check_trials(trials=12, seed=7)
        assert len(results) == 12
        assert all(r["max_rel_err"] < 1e-4 for r in results)
        seen = {(r["fos_variant"], r["include_sos"], r["sos_neighbor_mode"]) for r in results}
        assert len(seen) == 8

    def test_trials_validation(self):
        with pytest.raises(ValidationError):
            gradient_check_trials(trials=0)
