import math

import numpy as np
import pytest

from ssmlab.calibrate import (
    CLAMP_FLOOR,
    CalibrationConfig,
    CalibrationDivergedError,
    ScalingFactors,
    constant_factors,
    eval_loss,
    grad_calibrate,
    init_factors,
    resolve_scales,
    spsa_calibrate,
)
from ssmlab.model import ToyModelConfig, build_model, model_checksum, sequence_loss


@pytest.fixture
def model():
    return build_model(ToyModelConfig(vocab_size=16, d_m=8, d_h=4, n_layers=2,
                                      train_length=32, seed=2))


@pytest.fixture
def calib_set():
    return [np.random.default_rng(i).integers(0, 16, 48) for i in range(4)]


def quadratic(center):
    return lambda f: float(np.sum((f.values - center) ** 2))


class TestFactors:
    def test_init_is_deterministic(self):
        a = init_factors(4, 2, seed=9)
        b = init_factors(4, 2, seed=9)
        np.testing.assert_array_equal(a.values, b.values)

    def test_init_range(self):
        f = init_factors(64, 4, seed=1)
        assert f.values.shape == (4, 64)
        assert np.all(f.values > 0.0)
        assert np.all(f.values <= 1.0)
        assert np.all(f.values >= CLAMP_FLOOR)

    def test_layer_granularity_shape(self):
        assert init_factors(4, 1, seed=0).values.shape == (1, 4)

    def test_validation(self):
        with pytest.raises(ValueError):
            ScalingFactors(values=np.array([[0.5, -0.1]]))
        with pytest.raises(ValueError):
            ScalingFactors(values=np.ones((1, 2)), target="b")

    def test_constant_factors_broadcast(self, model):
        f = constant_factors(model, 2.0, "a")
        assert f.values.shape == (1, 2)
        assert np.all(f.values == 2.0)

    def test_resolve_layer_scalar(self, model):
        f = ScalingFactors(values=np.array([[2.0, 3.0]]), target="a")
        scales = resolve_scales(f, model)
        np.testing.assert_array_equal(scales[0][0], np.full(4, 2.0))
        np.testing.assert_array_equal(scales[1][0], np.full(4, 3.0))
        assert scales[0][1] is None

    def test_resolve_channel_vectors(self, model):
        vals = np.arange(1, 9, dtype=float).reshape(4, 2)
        f = ScalingFactors(values=vals, target="delta", granularity="channel")
        scales = resolve_scales(f, model)
        np.testing.assert_array_equal(scales[1][1], vals[:, 1])
        assert scales[0][0] is None

    def test_resolve_head_granularity_needs_mamba2(self, model):
        f = ScalingFactors(values=np.ones((2, 2)), target="a", granularity="head")
        with pytest.raises(ValueError, match="mamba2"):
            resolve_scales(f, model)
        m2 = build_model(ToyModelConfig(vocab_size=16, d_m=8, d_h=4, n_layers=2,
                                        train_length=32, seed=2,
                                        variant="mamba2", heads=2))
        scales = resolve_scales(f, m2)
        assert scales[0][0].shape == (4,)

    def test_layer_count_mismatch(self, model):
        f = ScalingFactors(values=np.ones((1, 3)), target="a")
        with pytest.raises(ValueError, match="layers"):
            resolve_scales(f, model)


class TestEvalLoss:
    def test_identity_factors_are_bitwise_neutral(self, model, calib_set):
        ones = ScalingFactors(values=np.ones((1, 2)), target="a")
        assert eval_loss(model, None, calib_set) == eval_loss(model, ones, calib_set)

    def test_pure_under_repetition(self, model, calib_set):
        f = init_factors(2, 1, seed=3)
        assert eval_loss(model, f, calib_set) == eval_loss(model, f, calib_set)

    def test_model_untouched(self, model, calib_set):
        before = model_checksum(model)
        eval_loss(model, init_factors(2, 1, seed=1), calib_set)
        assert model_checksum(model) == before

    def test_overflow_becomes_infinite_loss(self, model, calib_set):
        import copy as copymod
        blown = copymod.deepcopy(model)
        blown.params["layers.0.w_b"][:] = 1e308  # scan state overflows
        assert eval_loss(blown, None, calib_set) == math.inf

    def test_masked_loss_counts_only_selected_positions(self, model):
        seq = np.random.default_rng(0).integers(0, 16, 33)
        mask = np.zeros(33, dtype=bool)
        mask[-4:] = True
        masked = eval_loss(model, None, [seq], masks=[mask])
        full = eval_loss(model, None, [seq])
        assert masked != full


class TestSpsa:
    def test_quadratic_oracle_converges(self):
        cfg = CalibrationConfig(calib_set=[np.zeros(2, dtype=int)], c=0.01, eta=0.05,
                                iterations=500, seed=0)
        s0 = init_factors(4, 1, seed=1)
        final, trace = spsa_calibrate(None, cfg, s0, objective=quadratic(0.7))
        assert np.max(np.abs(final.values - 0.7)) < 0.05
        assert len(trace) == 500

    def test_zero_iterations_returns_clamped_start(self, model, calib_set):
        cfg = CalibrationConfig(calib_set=calib_set, iterations=0)
        s0 = init_factors(2, 1, seed=5)
        final, trace = spsa_calibrate(model, cfg, s0)
        np.testing.assert_array_equal(final.values, np.maximum(s0.values, CLAMP_FLOOR))
        assert trace.size == 0

    def test_fixed_seed_reproduces_trajectory(self):
        cfg = CalibrationConfig(calib_set=[np.zeros(2, dtype=int)], iterations=50, seed=4)
        s0 = init_factors(3, 1, seed=2)
        a = spsa_calibrate(None, cfg, s0, objective=quadratic(0.4))
        b = spsa_calibrate(None, cfg, s0, objective=quadratic(0.4))
        np.testing.assert_array_equal(a[0].values, b[0].values)
        np.testing.assert_array_equal(a[1], b[1])

    def test_clamp_floor_enforced(self):
        cfg = CalibrationConfig(calib_set=[np.zeros(2, dtype=int)], c=0.01, eta=0.2,
                                iterations=300, seed=0)
        s0 = init_factors(2, 1, seed=1)
        final, _ = spsa_calibrate(None, cfg, s0, objective=quadratic(-1.0))
        assert np.all(final.values >= CLAMP_FLOOR)

    def test_single_infinite_side_steps_away(self):
        wall = 0.8

        def obj(f):
            if np.any(f.values > wall):
                return math.inf
            return float(np.sum(f.values ** 2))

        cfg = CalibrationConfig(calib_set=[np.zeros(2, dtype=int)], c=0.05, eta=0.5,
                                iterations=120, seed=3)
        s0 = ScalingFactors(values=np.full((1, 2), 0.79))
        final, trace = spsa_calibrate(None, cfg, s0, objective=obj)
        assert np.all(final.values <= wall)
        assert np.all(np.isfinite(final.values))

    def test_persistent_blowup_aborts(self):
        cfg = CalibrationConfig(calib_set=[np.zeros(2, dtype=int)], iterations=50, seed=0)
        s0 = init_factors(2, 1, seed=0)
        with pytest.raises(CalibrationDivergedError):
            spsa_calibrate(None, cfg, s0, objective=lambda f: math.inf)

    def test_model_frozen_through_calibration(self, model, calib_set):
        before = model_checksum(model)
        cfg = CalibrationConfig(calib_set=calib_set, iterations=4, seed=0)
        spsa_calibrate(model, cfg, init_factors(2, 1, seed=0))
        assert model_checksum(model) == before


class TestGradCalibrate:
    def test_descends_on_model_loss(self, model, calib_set):
        cfg = CalibrationConfig(calib_set=calib_set, eta=0.05, iterations=12, seed=0)
        final, trace = grad_calibrate(model, cfg, init_factors(2, 1, seed=4, target="a"))
        assert trace[-1] < trace[0]
        assert np.all(final.values >= CLAMP_FLOOR)

    @pytest.mark.parametrize("target", ["a", "delta"])
    def test_gradient_matches_finite_differences(self, model, calib_set, target):
        stacked = np.stack(calib_set)
        from ssmlab.model import loss_and_grads

        s0 = init_factors(2, 1, seed=3, target=target)
        scales = resolve_scales(s0, model)
        _, _, sg = loss_and_grads(model, stacked[:, :-1], stacked[:, 1:], scales=scales,
                                  want_param_grads=False, want_scale_grads=True)
        key = "a_scale" if target == "a" else "delta_scale"
        analytic = np.array([sg[i][key].sum() for i in range(2)])
        h = 1e-6
        fd = np.zeros(2)
        for i in range(2):
            for sign in (1, -1):
                vals = s0.values.copy()
                vals[0, i] += sign * h
                f = ScalingFactors(values=vals, target=target)
                loss = sequence_loss(model, stacked[:, :-1], stacked[:, 1:],
                                     scales=resolve_scales(f, model))
                fd[i] += sign * loss
        fd /= 2 * h
        rel = np.abs(fd - analytic) / np.maximum(np.abs(fd), 1e-10)
        assert rel.max() < 1e-4

    def test_stationary_point_barely_moves(self):
        # Adam at an exact stationary point of a quadratic-like surrogate:
        # emulate by zero-gradient model? use tiny eta with the convex oracle
        cfg = CalibrationConfig(calib_set=[np.zeros(2, dtype=int)], c=0.01, eta=1e-9,
                                iterations=3, seed=0)
        s0 = ScalingFactors(values=np.full((1, 2), 0.7))
        final, _ = spsa_calibrate(None, cfg, s0, objective=quadratic(0.7))
        assert np.max(np.abs(final.values - 0.7)) < 1e-6

    def test_model_frozen(self, model, calib_set):
        before = model_checksum(model)
        cfg = CalibrationConfig(calib_set=calib_set, iterations=3, seed=0)
        grad_calibrate(model, cfg, init_factors(2, 1, seed=0, target="delta"))
        assert model_checksum(model) == before


def test_config_validation():
    with pytest.raises(ValueError):
        CalibrationConfig(calib_set=[], iterations=1)
    with pytest.raises(ValueError):
        CalibrationConfig(calib_set=[np.zeros(2)], c=0.0)
    with pytest.raises(ValueError):
        CalibrationConfig(calib_set=[np.zeros(2)], eta=-1.0)
