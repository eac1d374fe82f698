import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlip.errors import NonFiniteInput, ShapeMismatch
from dlip.losses import (
    SIGMA_SWEEP,
    attention_grouping,
    attention_grouping_oracle,
    clip_infonce,
    clip_infonce_oracle,
    finite_diff_check,
    grouping_boundary_margin,
    grouping_boundary_state,
    grouping_loss,
    grouping_loss_oracle,
    mpcl,
    mpcl_oracle,
    run_gradient_checks,
    total_loss,
    total_loss_oracle,
)


def unit(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class TestClipInfonce:
    def test_identity_pair_frozen_value(self):
        # z = I at tau 1: every term is -log(e / (e + 1))
        v = np.eye(2)
        out = clip_infonce(v, v.copy(), tau=1.0)
        assert out.value == pytest.approx(0.3132616875182228, abs=1e-15)
        assert out.value == pytest.approx(-math.log(math.e / (math.e + 1.0)), abs=1e-15)

    def test_single_pair_is_exactly_zero(self, rng):
        v, t = unit(rng, 1, 5), unit(rng, 1, 5)
        out = clip_infonce(v, t, tau=0.5)
        assert out.value == 0.0
        assert np.all(out.grad_image_globals == 0.0)
        assert np.all(out.grad_text_vectors == 0.0)
        assert out.grad_tau == 0.0

    def test_swap_symmetry_exact(self, rng):
        v, t = unit(rng, 6, 4), unit(rng, 6, 4)
        assert clip_infonce(v, t, 0.3).value == clip_infonce(t, v, 0.3).value

    def test_pair_permutation_invariance(self, rng):
        v, t = unit(rng, 7, 5), unit(rng, 7, 5)
        perm = rng.permutation(7)
        a = clip_infonce(v, t, 0.4).value
        b = clip_infonce(v[perm], t[perm], 0.4).value
        assert a == pytest.approx(b, abs=1e-12)

    def test_matches_oracle(self, rng):
        for _ in range(10):
            n, d = int(rng.integers(1, 7)), int(rng.integers(2, 6))
            v, t = unit(rng, n, d), unit(rng, n, d)
            tau = float(rng.uniform(0.2, 1.5))
            assert clip_infonce(v, t, tau).value == pytest.approx(
                clip_infonce_oracle(v, t, tau), abs=1e-10
            )

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            clip_infonce(unit(rng, 3, 4), unit(rng, 4, 4), 1.0)
        with pytest.raises(ShapeMismatch):
            clip_infonce(unit(rng, 4), unit(rng, 4), 1.0)

    def test_nonfinite_rejected(self, rng):
        v, t = unit(rng, 2, 3), unit(rng, 2, 3)
        bad = v.copy()
        bad[0, 0] = np.nan
        with pytest.raises(NonFiniteInput):
            clip_infonce(bad, t, 1.0)
        for tau in (0.0, -1.0, math.nan, math.inf):
            with pytest.raises(NonFiniteInput):
                clip_infonce(v, t, tau)


class TestMpcl:
    def test_k1_reduces_to_clip(self, rng):
        for _ in range(5):
            n, d = int(rng.integers(2, 8)), int(rng.integers(2, 8))
            v, t = unit(rng, n, d), unit(rng, n, d)
            tau = float(rng.uniform(0.2, 1.5))
            a = clip_infonce(v, t, tau)
            b = mpcl(v, t[:, None, :], tau)
            assert abs(a.value - b.value) < 1e-12
            assert np.max(np.abs(a.grad_image_globals - b.grad_image_globals)) < 1e-12
            assert np.max(np.abs(a.grad_text_vectors - b.grad_text_vectors[:, 0])) < 1e-12
            assert abs(a.grad_tau - b.grad_tau) < 1e-12

    def test_matches_oracle(self, rng):
        for _ in range(8):
            n, k, d = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
            v, t = unit(rng, n, d), unit(rng, n, k, d)
            tau = float(rng.uniform(0.2, 1.5))
            assert mpcl(v, t, tau).value == pytest.approx(
                mpcl_oracle(v, t, tau), abs=1e-10
            )

    def test_subcaption_order_invariance(self, rng):
        v, t = unit(rng, 4, 5), unit(rng, 4, 3, 5)
        shuffled = t[:, [2, 0, 1], :]
        a = mpcl(v, t, 0.5).value
        b = mpcl(v, shuffled, 0.5).value
        assert a == pytest.approx(b, abs=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            mpcl(unit(rng, 3, 4), unit(rng, 3, 4), 1.0)
        with pytest.raises(ShapeMismatch):
            mpcl(unit(rng, 3, 4), unit(rng, 2, 2, 4), 1.0)
        with pytest.raises(ShapeMismatch):
            mpcl(unit(rng, 3, 4), unit(rng, 3, 2, 5), 1.0)


class TestAttentionGrouping:
    def test_hand_built_medium_sigma(self):
        p = np.eye(4)
        t = np.array([[0.6, 0.8, 0.0, 0.0]])
        g = attention_grouping(t, p, sigma=0.5)
        assert np.allclose(g.coefficients[0], [3 / 7, 4 / 7, 0, 0], atol=1e-15)
        assert np.allclose(g.pooled[0], [0.6, 0.8, 0.0, 0.0], atol=1e-15)
        assert not g.fallback[0]

    def test_hand_built_high_sigma_drops_weak_patch(self):
        p = np.eye(4)
        t = np.array([[0.6, 0.8, 0.0, 0.0]])
        g = attention_grouping(t, p, sigma=0.7)
        assert g.coefficients[0].tolist() == [0.0, 1.0, 0.0, 0.0]
        assert np.allclose(g.pooled[0], p[1], atol=1e-15)
        assert not g.fallback[0]

    def test_fallback_picks_argmax_raw(self):
        p = np.eye(4)
        t = np.array([[0.6, 0.8, 0.0, 0.0]])
        g = attention_grouping(t, p, sigma=0.9)
        assert g.fallback[0]
        assert g.coefficients[0].tolist() == [0.0, 1.0, 0.0, 0.0]
        assert np.allclose(g.pooled[0], p[1], atol=1e-15)

    def test_fallback_tie_takes_lowest_index(self):
        p = np.eye(3)[:2]  # e1, e2
        t = np.array([[0.0, 0.0, 1.0]])  # orthogonal to both patches
        g = attention_grouping(t, p, sigma=0.0)
        assert g.fallback[0]
        assert g.coefficients[0].tolist() == [1.0, 0.0]

    def test_negative_cosines_clamped(self):
        p = np.eye(2)
        t = np.array([[-1.0, 0.0]])
        g = attention_grouping(t, p, sigma=0.0)
        assert g.raw_weights[0].tolist() == [0.0, 0.0]
        assert g.fallback[0]

    def test_rows_are_convex_and_unit(self, rng):
        for sigma in SIGMA_SWEEP:
            t, p = unit(rng, 5, 6), unit(rng, 12, 6)
            g = attention_grouping(t, p, sigma)
            assert np.all(g.coefficients >= 0.0)
            assert np.allclose(g.coefficients.sum(axis=1), 1.0, atol=1e-9)
            assert np.allclose(np.linalg.norm(g.pooled, axis=1), 1.0, atol=1e-9)

    def test_support_shrinks_with_sigma(self, rng):
        t, p = unit(rng, 6, 5), unit(rng, 10, 5)
        supports = [
            int(np.count_nonzero(attention_grouping(t, p, s).sparse_weights))
            for s in SIGMA_SWEEP
        ]
        assert supports == sorted(supports, reverse=True)

    def test_matches_oracle(self, rng):
        for sigma in (0.0, 0.3, 0.7):
            t, p = unit(rng, 4, 5), unit(rng, 9, 5)
            g = attention_grouping(t, p, sigma)
            oracle = np.array(attention_grouping_oracle(t.tolist(), p.tolist(), sigma))
            assert np.allclose(g.pooled, oracle, atol=1e-10)

    def test_sigma_validation(self, rng):
        t, p = unit(rng, 2, 3), unit(rng, 4, 3)
        for sigma in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                attention_grouping(t, p, sigma)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            attention_grouping(unit(rng, 2, 3), unit(rng, 4, 5), 0.0)
        with pytest.raises(ShapeMismatch):
            attention_grouping(unit(rng, 2, 2, 3), unit(rng, 4, 3), 0.0)


class TestGroupingLoss:
    def test_k1_within_image_is_exactly_zero(self, rng):
        t, p = unit(rng, 3, 1, 4), unit(rng, 3, 6, 4)
        out = grouping_loss(t, p, sigma=0.1, tau=0.5)
        assert out.value == 0.0
        assert np.all(out.grad_text_vectors == 0.0)
        assert np.all(out.grad_patches == 0.0)
        assert out.grad_tau == 0.0

    def test_matches_oracle(self, rng):
        for cross in (False, True):
            for sigma in (0.0, 0.3, 0.7):
                n, k, hw, d = 3, 2, 5, 4
                t, p = unit(rng, n, k, d), unit(rng, n, hw, d)
                out = grouping_loss(t, p, sigma, 0.7, cross_image=cross)
                want = grouping_loss_oracle(t.tolist(), p.tolist(), sigma, 0.7, cross)
                assert out.value == pytest.approx(want, abs=1e-10)

    def test_all_fallback_rows_still_finite(self, rng):
        t = unit(rng, 2, 3, 4)
        p = unit(rng, 2, 5, 4)
        out = grouping_loss(t, p, sigma=0.999999, tau=1.0)
        assert math.isfinite(out.value)

    def test_image_permutation_invariance(self, rng):
        t, p = unit(rng, 5, 3, 4), unit(rng, 5, 7, 4)
        perm = rng.permutation(5)
        a = grouping_loss(t, p, 0.1, 0.5).value
        b = grouping_loss(t[perm], p[perm], 0.1, 0.5).value
        assert a == pytest.approx(b, abs=1e-12)

    def test_cross_image_widens_denominator(self, rng):
        t, p = unit(rng, 4, 3, 5), unit(rng, 4, 6, 5)
        within = grouping_loss(t, p, 0.0, 0.5, cross_image=False).value
        cross = grouping_loss(t, p, 0.0, 0.5, cross_image=True).value
        assert cross > within  # more negatives can only grow the -log term

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            grouping_loss(unit(rng, 3, 2, 4), unit(rng, 2, 5, 4), 0.0, 1.0)
        with pytest.raises(ShapeMismatch):
            grouping_loss(unit(rng, 3, 4), unit(rng, 3, 5, 4), 0.0, 1.0)


class TestTotalLoss:
    def test_zero_weights_exact_zero(self, rng):
        v, t, p = unit(rng, 3, 4), unit(rng, 3, 2, 4), unit(rng, 3, 5, 4)
        out = total_loss(v, t, p, sigma=0.3, tau=0.5, lambda_mpcl=0.0, lambda_s=0.0)
        assert out.value == 0.0
        assert np.all(out.grad_image_globals == 0.0)
        assert np.all(out.grad_text_vectors == 0.0)
        assert np.all(out.grad_patches == 0.0)
        assert out.grad_tau == 0.0

    def test_combines_branches_exactly(self, rng):
        v, t, p = unit(rng, 4, 5), unit(rng, 4, 3, 5), unit(rng, 4, 6, 5)
        lm, ls = 0.8, 1.3
        out = total_loss(v, t, p, 0.1, 0.6, lm, ls)
        m = mpcl(v, t, 0.6)
        s = grouping_loss(t, p, 0.1, 0.6)
        assert out.value == lm * m.value + ls * s.value
        assert out.parts == {"mpcl": m.value, "grouping": s.value}
        assert np.array_equal(out.grad_image_globals, lm * m.grad_image_globals)
        assert np.allclose(
            out.grad_text_vectors,
            lm * m.grad_text_vectors + ls * s.grad_text_vectors,
            atol=0,
        )
        assert np.array_equal(out.grad_patches, ls * s.grad_patches)

    def test_matches_oracle(self, rng):
        for _ in range(5):
            n, k, hw, d = 3, 2, 4, 4
            v, t, p = unit(rng, n, d), unit(rng, n, k, d), unit(rng, n, hw, d)
            out = total_loss(v, t, p, 0.3, 0.7, 1.0, 0.7)
            want = total_loss_oracle(v.tolist(), t.tolist(), p.tolist(), 0.3, 0.7, 1.0, 0.7)
            assert out.value == pytest.approx(want, abs=1e-10)

    def test_negative_weights_rejected(self, rng):
        v, t, p = unit(rng, 2, 3), unit(rng, 2, 2, 3), unit(rng, 2, 4, 3)
        with pytest.raises(ValueError):
            total_loss(v, t, p, 0.0, 1.0, lambda_mpcl=-1.0)
        with pytest.raises(ValueError):
            total_loss(v, t, p, 0.0, 1.0, lambda_s=-0.5)


class TestFiniteDiffChecker:
    def test_quadratic_is_machine_precise(self, rng):
        a = rng.standard_normal((6, 6))
        a = a + a.T

        def fn(inputs):
            (x,) = inputs
            return float(x @ a @ x), [2.0 * a @ x]

        report = finite_diff_check(fn, [rng.standard_normal(6)], directions=16)
        assert report.max_rel_err < 1e-9

    def test_detects_wrong_gradient(self, rng):
        def fn(inputs):
            (x,) = inputs
            return float(np.sum(x * x)), [2.02 * x]  # 1% off

        report = finite_diff_check(fn, [rng.standard_normal(5)], directions=8)
        assert report.max_rel_err > 1e-3
        assert not report.passed(1e-4)

    def test_rejects_non_f64(self):
        def fn(inputs):
            (x,) = inputs
            return float(np.sum(x)), [np.ones_like(x)]

        with pytest.raises(ValueError):
            finite_diff_check(fn, [np.zeros(3, dtype=np.float32)])

    def test_rejects_gradient_count_mismatch(self):
        def fn(inputs):
            return 0.0, []

        with pytest.raises(ValueError):
            finite_diff_check(fn, [np.zeros(3)])

    def test_boundary_redraw_avoids_kink(self):
        # f = relu(x0) + x1 with x0 sitting closer to the kink than h
        x = np.array([5e-6, 1.0])

        def fn(inputs):
            (z,) = inputs
            return float(max(z[0], 0.0) + z[1]), [np.array([1.0 * (z[0] > 0), 1.0])]

        def state(inputs):
            return np.array([inputs[0][0] > 0.0])

        report = finite_diff_check(fn, [x], directions=16, h=1e-5, boundary_state=state)
        assert report.redraws > 0
        assert report.max_rel_err < 1e-6

    def test_report_text_mentions_outcome(self, rng):
        def fn(inputs):
            (x,) = inputs
            return float(np.sum(x * x)), [2.0 * x]

        report = finite_diff_check(fn, [rng.standard_normal(4)], directions=4)
        assert "PASS" in report.text(1e-4)
        assert "max rel err" in report.text(1e-4)


class TestBoundaryHelpers:
    def test_margin_zero_at_threshold(self):
        t = np.array([[1.0, 0.0]])
        p = np.array([[0.3, np.sqrt(1 - 0.09)]])
        assert grouping_boundary_margin(t[None][0][None], p[None][0][None], 0.3) == pytest.approx(0.0, abs=1e-15)

    def test_state_changes_when_mask_flips(self, rng):
        t, p = unit(rng, 1, 2, 3)[0][None], unit(rng, 1, 4, 3)[0][None]
        s_low = grouping_boundary_state(t, p, 0.0)
        s_high = grouping_boundary_state(t, p, 0.999999)
        assert not np.array_equal(s_low, s_high)


class TestGradientSuite:
    def test_small_suite_passes(self):
        report = run_gradient_checks(instances=3, directions=8, seed=7)
        assert report.passed(1e-4)
        assert len(report.reports) == 12  # four losses per instance
        assert "overall max rel err" in report.text()


@settings(max_examples=60, deadline=None)
@given(
    k=st.integers(1, 6),
    hw=st.integers(1, 16),
    d=st.integers(2, 8),
    sigma=st.sampled_from(SIGMA_SWEEP),
    seed=st.integers(0, 2**31 - 1),
)
def test_grouping_rows_always_convex(k, hw, d, sigma, seed):
    rng = np.random.default_rng(seed)
    g = attention_grouping(unit(rng, k, d), unit(rng, hw, d), sigma)
    assert np.all(g.coefficients >= 0.0)
    assert np.allclose(g.coefficients.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 5),
    k=st.integers(1, 4),
    d=st.integers(2, 6),
    seed=st.integers(0, 2**31 - 1),
)
def test_mpcl_value_matches_oracle_property(n, k, d, seed):
    rng = np.random.default_rng(seed)
    v, t = unit(rng, n, d), unit(rng, n, k, d)
    assert mpcl(v, t, 0.5).value == pytest.approx(mpcl_oracle(v, t, 0.5), abs=1e-10)
