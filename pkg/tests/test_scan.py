import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmlab.scan import (
    ScanOverflowError,
    SsmLayerParams,
    cumulative_transition,
    discretize,
    materialize_mixing_matrix,
    resolve_scale,
    selective_scan,
)

from conftest import random_layer


def constant_delta_layer(a, delta, d_m=1):
    """Layer whose step size is pinned to `delta` via the bias (zero weights)."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    d_h = a.shape[0]
    return SsmLayerParams(
        a_diag=a,
        w_delta=np.zeros((d_h, d_m)),
        b_delta=np.full(d_h, math.log(math.expm1(delta))),
        w_b=np.ones((d_h, d_m)),
        w_c=np.ones((d_h, d_m)),
    )


def naive_mixing_matrix(params, xs, a_scale=None, delta_scale=None):
    """Independent row-product construction of the mixing matrix."""
    steps = [discretize(params, x, a_scale, delta_scale) for x in xs]
    n = len(xs)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            prod = np.ones(params.d_h)
            for t in range(j + 1, i + 1):
                prod = prod * steps[t].a_bar
            m[i, j] = float(steps[i].c @ (prod * steps[j].b_bar))
    return m


class TestDiscretize:
    def test_pinned_delta_half(self):
        layer = constant_delta_layer(np.ones(2), 0.5)
        step = discretize(layer, np.array([1.0]))
        assert np.allclose(step.delta, 0.5)
        assert np.allclose(step.a_bar, math.exp(-0.5))

    def test_identity_scaling_is_bitwise(self, rng):
        layer = random_layer(rng)
        x = rng.normal(size=3)
        plain = discretize(layer, x)
        scaled = discretize(layer, x, a_scale=np.ones(4), delta_scale=np.ones(4))
        assert np.array_equal(plain.a_bar, scaled.a_bar)
        assert np.array_equal(plain.b_bar, scaled.b_bar)
        assert np.array_equal(plain.c, scaled.c)

    def test_halving_a_matches_halved_diagonal(self):
        # scaling a=2 by 0.5 at fixed delta equals using a=1 outright
        step = discretize(constant_delta_layer([2.0], 0.3), np.zeros(1), a_scale=0.5)
        assert np.allclose(step.a_bar, math.exp(-0.3))

    def test_scaling_commutes_with_powering(self, rng):
        layer = random_layer(rng)
        x = rng.normal(size=3)
        for s in (0.25, 0.5, 2.0, 3.7):
            scaled = discretize(layer, x, a_scale=s)
            base = discretize(layer, x)
            np.testing.assert_allclose(scaled.a_bar, base.a_bar ** s, rtol=1e-12)

    def test_rejects_non_finite_input(self, rng):
        layer = random_layer(rng)
        with pytest.raises(ValueError):
            discretize(layer, np.array([1.0, np.nan, 0.0]))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_a_bar_strictly_inside_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        layer = random_layer(rng)
        step = discretize(layer, rng.normal(size=3),
                          a_scale=rng.uniform(0.05, 5.0),
                          delta_scale=rng.uniform(0.05, 5.0))
        assert np.all(step.a_bar > 0.0)
        assert np.all(step.a_bar < 1.0)
        assert np.all(step.delta > 0.0)


class TestSelectiveScan:
    def test_single_step_unrolls_by_hand(self, rng):
        layer = random_layer(rng)
        x = rng.normal(size=(1, 3))
        step = discretize(layer, x[0])
        ys, state, norms = selective_scan(layer, x)
        expect_h = step.b_bar[:, None] * x[0][None, :]
        np.testing.assert_allclose(state.h, expect_h)
        np.testing.assert_allclose(ys[0], step.c @ expect_h)
        assert state.t == 1

    def test_huge_a_is_memoryless(self, rng):
        layer = random_layer(rng)
        layer = SsmLayerParams(
            a_diag=np.full(4, 5e4), w_delta=layer.w_delta, b_delta=layer.b_delta,
            w_b=layer.w_b, w_c=layer.w_c,
        )
        xs = rng.normal(size=(6, 3))
        ys, _, _ = selective_scan(layer, xs)
        for t in range(6):
            step = discretize(layer, xs[t])
            memoryless = step.c @ (step.b_bar[:, None] * xs[t][None, :])
            np.testing.assert_allclose(ys[t], memoryless, atol=1e-12)

    def test_matches_mixing_matrix_on_fixed_instance(self, rng):
        layer = random_layer(rng, d_h=4, d_m=3)
        xs = rng.normal(size=(8, 3))
        ys, _, _ = selective_scan(layer, xs)
        _, y_mat = materialize_mixing_matrix(layer, xs)
        assert np.max(np.abs(y_mat - ys)) < 1e-10 * np.max(np.abs(y_mat))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), length=st.integers(1, 64))
    def test_matches_mixing_matrix_everywhere(self, seed, length):
        rng = np.random.default_rng(seed)
        layer = random_layer(rng, d_h=int(rng.integers(1, 6)), d_m=int(rng.integers(1, 4)))
        xs = rng.normal(size=(length, layer.d_m))
        ys, _, _ = selective_scan(layer, xs)
        _, y_mat = materialize_mixing_matrix(layer, xs)
        scale = max(np.max(np.abs(y_mat)), 1e-12)
        assert np.max(np.abs(y_mat - ys)) < 1e-8 * scale

    def test_causality_under_perturbation(self, rng):
        layer = random_layer(rng)
        xs = rng.normal(size=(12, 3))
        ys, _, _ = selective_scan(layer, xs)
        bumped = xs.copy()
        bumped[7] += 3.0
        ys2, _, _ = selective_scan(layer, bumped)
        np.testing.assert_array_equal(ys[:7], ys2[:7])
        assert not np.allclose(ys[7:], ys2[7:])

    def test_scan_resumes_from_state(self, rng):
        layer = random_layer(rng)
        xs = rng.normal(size=(10, 3))
        full, state_full, _ = selective_scan(layer, xs)
        head, state_mid, _ = selective_scan(layer, xs[:4])
        tail, state_end, _ = selective_scan(layer, xs[4:], h0=state_mid)
        np.testing.assert_allclose(np.vstack([head, tail]), full, rtol=1e-13)
        np.testing.assert_allclose(state_end.h, state_full.h, rtol=1e-13)

    def test_norm_trace_matches_state_norms(self, rng):
        layer = random_layer(rng)
        xs = rng.normal(size=(5, 3))
        _, _, norms = selective_scan(layer, xs)
        h = np.zeros((4, 3))
        for t in range(5):
            step = discretize(layer, xs[t])
            h = step.a_bar[:, None] * h + step.b_bar[:, None] * xs[t][None, :]
            np.testing.assert_allclose(norms[t], np.linalg.norm(h, axis=0))

    def test_overflow_raises_with_step_index(self):
        layer = constant_delta_layer(np.ones(2), 0.05, d_m=1)
        xs = np.full((3, 1), 1e200)
        with pytest.raises(ScanOverflowError) as err:
            selective_scan(layer, xs)
        assert err.value.step == 0

    def test_empty_sequence_rejected(self, rng):
        layer = random_layer(rng)
        with pytest.raises(ValueError):
            selective_scan(layer, np.zeros((0, 3)))


class TestMixingMatrix:
    def test_single_step_is_scalar_cb(self, rng):
        layer = random_layer(rng)
        xs = rng.normal(size=(1, 3))
        m, _ = materialize_mixing_matrix(layer, xs)
        step = discretize(layer, xs[0])
        assert m.shape == (1, 1)
        np.testing.assert_allclose(m[0, 0], step.c @ step.b_bar)

    def test_diagonal_entries_skip_transitions(self, rng):
        layer = random_layer(rng)
        xs = rng.normal(size=(6, 3))
        m, _ = materialize_mixing_matrix(layer, xs)
        for i in range(6):
            step = discretize(layer, xs[i])
            np.testing.assert_allclose(m[i, i], step.c @ step.b_bar)

    def test_strictly_lower_triangular_above_diagonal(self, rng):
        layer = random_layer(rng)
        xs = rng.normal(size=(7, 3))
        m, _ = materialize_mixing_matrix(layer, xs)
        assert np.array_equal(np.triu(m, 1), np.zeros_like(m))

    def test_agrees_with_naive_construction(self, rng):
        layer = random_layer(rng)
        xs = rng.normal(size=(6, 3))
        m, _ = materialize_mixing_matrix(layer, xs)
        np.testing.assert_allclose(m, naive_mixing_matrix(layer, xs), rtol=1e-12)

    def test_length_guard(self, rng):
        layer = random_layer(rng)
        xs = rng.normal(size=(9, 3))
        with pytest.raises(ValueError, match="guard"):
            materialize_mixing_matrix(layer, xs, max_len=8)


class TestCumulativeTransition:
    def test_equal_steps_collapse_geometrically(self):
        a = np.array([0.5, 1.0, 2.0])
        res = cumulative_transition(a, np.full(7, 0.2))
        np.testing.assert_allclose(res.stepwise, np.exp(-a * 7 * 0.2), rtol=1e-12)
        assert res.max_rel_diff < 1e-12

    def test_single_step(self):
        a = np.array([1.3])
        res = cumulative_transition(a, np.array([0.4]))
        np.testing.assert_allclose(res.summed, np.exp(-0.52))
        assert res.max_rel_diff < 1e-15

    def test_random_thousand_steps(self, rng):
        deltas = rng.uniform(1e-6, 0.1, 1000)
        res = cumulative_transition(np.array([1.0]), deltas)
        assert res.max_rel_diff < 1e-9

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), n=st.integers(1, 10_000))
    def test_identity_up_to_ten_thousand_steps(self, seed, n):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.05, 2.0, 3)
        deltas = rng.uniform(1e-6, 0.05, n)
        assert cumulative_transition(a, deltas).max_rel_diff < 1e-9

    def test_rejects_nonpositive_deltas(self):
        with pytest.raises(ValueError):
            cumulative_transition(np.ones(2), np.array([0.1, 0.0]))


class TestParamsValidation:
    def test_rejects_nonpositive_a(self, rng):
        with pytest.raises(ValueError):
            SsmLayerParams(a_diag=np.array([0.5, -1.0]),
                           w_delta=np.zeros((2, 3)), b_delta=np.zeros(2),
                           w_b=np.zeros((2, 3)), w_c=np.zeros((2, 3)))

    def test_mamba2_requires_head_constant_diagonal(self):
        with pytest.raises(ValueError, match="head"):
            SsmLayerParams(a_diag=np.array([1.0, 2.0, 3.0, 4.0]),
                           w_delta=np.zeros((4, 3)), b_delta=np.zeros(4),
                           w_b=np.zeros((4, 3)), w_c=np.zeros((4, 3)),
                           variant="mamba2", heads=2)

    def test_mamba2_accepts_shared_values(self, rng):
        layer = random_layer(rng, d_h=4, variant="mamba2", heads=2)
        assert layer.heads == 2

    def test_resolve_scale_shapes(self):
        np.testing.assert_array_equal(resolve_scale(None, 4), np.ones(4))
        np.testing.assert_array_equal(resolve_scale(2.0, 3), np.full(3, 2.0))
        np.testing.assert_array_equal(resolve_scale(np.array([1.0, 2.0]), 4, heads=2),
                                      np.array([1.0, 1.0, 2.0, 2.0]))
        with pytest.raises(ValueError):
            resolve_scale(np.array([1.0, 2.0, 3.0]), 4)
        with pytest.raises(ValueError):
            resolve_scale(-1.0, 4)
