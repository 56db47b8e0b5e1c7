"""Analytic gradients against an independent naive numeric oracle.

The oracle differentiates reference_impl.total_loss by central differences
on raw coordinates. That path re-derives the discrete choices at every
perturbed point, so agreement is only meaningful on batches that sit away
from ties; batches here are chosen (by seed) to be in smooth regions.
"""

import math

import numpy as np
import pytest

import reference_impl as ref
from conftest import random_batch
from sosd.core import PairBatch, project_rows
from sosd.losses import LossConfig, finite_difference_check, total_loss

H = 1e-6


def naive_numeric_grads(batch, cfg, include_sos=True):
    """Central-difference gradients of the naive reference total loss."""
    labels = batch.labels.tolist()

    def value(a, p):
        return ref.total_loss(
            a.tolist(),
            p.tolist(),
            labels,
            cfg.margin,
            cfg.k,
            cfg.fos_variant,
            cfg.sos_neighbor_mode,
            include_sos=include_sos,
        )

    grads = []
    for which in range(2):
        base = batch.anchors if which == 0 else batch.positives
        g = np.zeros_like(base)
        for r in range(base.shape[0]):
            for c in range(base.shape[1]):
                plus = base.copy()
                plus[r, c] += H
                minus = base.copy()
                minus[r, c] -= H
                if which == 0:
                    f_plus = value(plus, batch.positives)
                    f_minus = value(minus, batch.positives)
                else:
                    f_plus = value(batch.anchors, plus)
                    f_minus = value(batch.anchors, minus)
                g[r, c] = (f_plus - f_minus) / (2.0 * H)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, atol=1e-6, rtol=1e-4):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


class TestAnalyticVersusNaiveNumeric:
    @pytest.mark.parametrize("variant", ["qht", "ht"])
    @pytest.mark.parametrize("mode", ["same_side", "full_batch"])
    def test_random_smooth_batch(self, variant, mode):
        batch = random_batch(np.random.default_rng(0), 4, 3)
        cfg = LossConfig(k=1, fos_variant=variant, sos_neighbor_mode=mode)
        # guard: the checker must agree the point is smooth
        assert finite_difference_check(batch, cfg) < 1e-4
        report = total_loss(batch, cfg)
        gx, gy = naive_numeric_grads(batch, cfg)
        assert_grads_close(report.grad_anchors, gx)
        assert_grads_close(report.grad_positives, gy)

    def test_worked_example(self, spec_example_batch):
        cfg = LossConfig(k=1, sos_neighbor_mode="full_batch")
        report = total_loss(spec_example_batch, cfg)
        gx, gy = naive_numeric_grads(spec_example_batch, cfg)
        assert_grads_close(report.grad_anchors, gx)
        assert_grads_close(report.grad_positives, gy)

    def test_first_order_only(self):
        batch = random_batch(np.random.default_rng(3), 5, 4)
        cfg = LossConfig(k=2)
        report = total_loss(batch, cfg, include_sos=False)
        gx, gy = naive_numeric_grads(batch, cfg, include_sos=False)
        assert_grads_close(report.grad_anchors, gx)
        assert_grads_close(report.grad_positives, gy)


class TestFiniteDifferenceHarness:
    def test_batch_8_by_32(self):
        batch = random_batch(np.random.default_rng(0), 8, 32)
        err = finite_difference_check(batch, LossConfig(k=2))
        assert err < 1e-4

    def test_report_total_is_component_sum(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            batch = random_batch(rng, 6, 5)
            report = total_loss(batch, LossConfig(k=2))
            assert report.total_loss == report.fos_loss + report.sos_loss


class TestDescentStep:
    def test_projected_gradient_step_decreases_loss(self):
        batch = random_batch(np.random.default_rng(4), 8, 16)
        cfg = LossConfig(k=3)
        report = total_loss(batch, cfg)
        lr = 1e-3
        stepped = PairBatch(
            anchors=project_rows(batch.anchors - lr * report.grad_anchors),
            positives=project_rows(batch.positives - lr * report.grad_positives),
            labels=batch.labels,
        )
        after = total_loss(stepped, cfg)
        assert after.total_loss < report.total_loss
