import numpy as np
import pytest

from ssmlab.model import (
    CheckpointError,
    ToyModelConfig,
    TrainDivergedError,
    build_model,
    cross_entropy,
    decode_greedy,
    forward,
    forward_batch,
    load_checkpoint,
    loss_and_grads,
    model_checksum,
    perplexity_by_length,
    save_checkpoint,
    sequence_loss,
    train,
)
from ssmlab.scan import ScanOverflowError
from ssmlab.tasks import copy_batches, lm_batches, synthetic_corpus

TINY = ToyModelConfig(vocab_size=11, d_m=8, d_h=4, n_layers=2, train_length=32, seed=3)


def tiny_model(**overrides):
    kwargs = {**TINY.__dict__, **overrides}
    kwargs.pop("a_init_range", None)
    kwargs.pop("delta_init_range", None)
    return build_model(ToyModelConfig(**kwargs))


def max_grad_mismatch(model, inputs, targets, grads, rng, per_tensor=4, h=1e-5):
    worst = 0.0
    for name, arr in model.params.items():
        flat = arr.reshape(-1)
        for j in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + h
            lp = sequence_loss(model, inputs, targets)
            flat[j] = old - h
            lm = sequence_loss(model, inputs, targets)
            flat[j] = old
            fd = (lp - lm) / (2 * h)
            an = grads[name].reshape(-1)[j]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


class TestBuild:
    def test_same_seed_same_parameters(self):
        a, b = tiny_model(), tiny_model()
        assert model_checksum(a) == model_checksum(b)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_different_seed_differs(self):
        assert model_checksum(tiny_model()) != model_checksum(tiny_model(seed=4))

    def test_mamba2_shares_diagonal_within_heads(self):
        model = tiny_model(variant="mamba2", heads=2)
        a = model.a_diag(0)
        assert a.shape == (4,)
        assert a[0] == a[1] and a[2] == a[3]

    def test_parameter_count_matches_arithmetic(self):
        model = tiny_model()
        v, d_m, d_h, n = 11, 8, 4, 2
        per_layer = d_h + d_h * d_m + d_h + d_h * d_m + d_h * d_m + d_m + d_m * d_m
        expected = v * d_m + n * per_layer + d_m + v * d_m
        assert model.param_count() == expected

    def test_heads_rejected_for_plain_variant(self):
        with pytest.raises(ValueError):
            ToyModelConfig(vocab_size=8, d_m=4, d_h=4, n_layers=1,
                           train_length=32, heads=2)


class TestForward:
    def test_single_token_logit_shape(self):
        model = tiny_model()
        logits, norms = forward(model, np.array([5]))
        assert logits.shape == (1, 11)
        assert len(norms) == 2 and norms[0].shape == (1, 8)

    def test_future_tokens_do_not_change_past_logits(self, rng):
        model = tiny_model()
        toks = rng.integers(0, 11, 20)
        logits, _ = forward(model, toks)
        toks2 = toks.copy()
        toks2[12:] = (toks2[12:] + 3) % 11
        logits2, _ = forward(model, toks2)
        np.testing.assert_array_equal(logits[:12], logits2[:12])

    def test_unit_scales_are_bitwise_identical(self, rng):
        model = tiny_model()
        toks = rng.integers(0, 11, 16)
        ones = [(np.ones(4), np.ones(4)) for _ in range(2)]
        a, _ = forward(model, toks)
        b, _ = forward(model, toks, scales=ones)
        np.testing.assert_array_equal(a, b)

    def test_out_of_vocab_rejected(self):
        with pytest.raises(ValueError, match="vocabulary"):
            forward(tiny_model(), np.array([11]))

    def test_overflow_reports_layer_and_step(self):
        model = tiny_model()
        # an enormous input projection overflows the first layer's state
        model.params["layers.0.w_b"][:] = 1e300
        with pytest.raises(ScanOverflowError) as err:
            forward(model, np.array([1, 2, 3]))
        assert err.value.layer == 0
        assert err.value.step == 0


class TestGradients:
    @pytest.mark.parametrize("variant,heads,gated", [
        ("mamba", None, False),
        ("mamba", None, True),
        ("mamba2", 2, False),
    ])
    def test_analytic_matches_finite_differences(self, variant, heads, gated, rng):
        model = tiny_model(variant=variant, heads=heads, gated=gated)
        toks = rng.integers(0, 11, (2, 17))
        inputs, targets = toks[:, :-1], toks[:, 1:]
        loss, grads, _ = loss_and_grads(model, inputs, targets)
        assert np.isfinite(loss)
        assert max_grad_mismatch(model, inputs, targets, grads, rng) < 1e-4

    def test_masked_loss_gradients(self, rng):
        model = tiny_model()
        toks = rng.integers(0, 11, (2, 17))
        inputs, targets = toks[:, :-1], toks[:, 1:]
        mask = rng.random((2, 16)) < 0.4
        mask[0, 0] = True
        loss, grads, _ = loss_and_grads(model, inputs, targets, mask=mask)
        h = 1e-5
        name = "lm_head"
        flat = model.params[name].reshape(-1)
        j = 7
        old = flat[j]
        flat[j] = old + h
        lp = sequence_loss(model, inputs, targets, mask=mask)
        flat[j] = old - h
        lm = sequence_loss(model, inputs, targets, mask=mask)
        flat[j] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - grads[name].reshape(-1)[j]) / max(abs(fd), 1e-8) < 1e-4


class TestTraining:
    def test_zero_learning_rate_changes_nothing(self):
        model = tiny_model()
        before = model_checksum(model)
        batch = copy_batches(32, 4, batch_size=2, seed=0, vocab=11)
        train(model, batch, steps=3, lr=0.0)
        assert model_checksum(model) == before

    def test_loss_decreases_on_text(self):
        model = tiny_model(d_m=16, vocab_size=256)
        corpus = synthetic_corpus(20_000, seed=0)
        batch = lm_batches(corpus, 32, batch_size=8, seed=0)
        curve = train(model, batch, steps=80, lr=5e-3)
        assert np.mean(curve[-10:]) < 0.7 * np.mean(curve[:5])

    def test_training_trajectory_is_deterministic(self):
        curves = []
        sums = []
        for _ in range(2):
            model = tiny_model()
            batch = copy_batches(32, 3, batch_size=2, seed=5, vocab=11)
            curves.append(train(model, batch, steps=5, lr=1e-3))
            sums.append(model_checksum(model))
        np.testing.assert_array_equal(curves[0], curves[1])
        assert sums[0] == sums[1]

    def test_frozen_dynamics_stay_at_initialization(self):
        model = tiny_model(train_dynamics=False)
        init = {k: v.copy() for k, v in model.params.items()}
        batch = copy_batches(32, 3, batch_size=2, seed=1, vocab=11)
        train(model, batch, steps=5, lr=1e-2)
        for k in model.params:
            frozen = k.endswith((".log_a", ".w_delta", ".b_delta"))
            changed = not np.array_equal(model.params[k], init[k])
            assert changed != frozen, k

    def test_divergence_aborts(self):
        model = tiny_model()
        batch = copy_batches(32, 3, batch_size=2, seed=2, vocab=11)
        with pytest.raises(TrainDivergedError):
            train(model, batch, steps=400, lr=1e6)


class TestPerplexity:
    def test_zeroed_head_scores_at_vocabulary_size(self, rng):
        model = tiny_model()
        model.params["lm_head"][:] = 0.0
        corpus = rng.integers(0, 11, 4000)
        for length, ppl in perplexity_by_length(model, corpus, [64, 256]):
            assert abs(ppl - 11.0) < 1e-9

    def test_training_beats_untrained_at_train_length(self):
        trained = tiny_model(d_m=16, vocab_size=256)
        corpus = synthetic_corpus(20_000, seed=0)
        batch = lm_batches(corpus, 64, batch_size=8, seed=0)
        train(trained, batch, steps=80, lr=5e-3)
        fresh = tiny_model(d_m=16, vocab_size=256)
        held = synthetic_corpus(4_000, seed=9)
        ppl_t = perplexity_by_length(trained, held, [64])[0][1]
        ppl_f = perplexity_by_length(fresh, held, [64])[0][1]
        assert ppl_t < ppl_f

    def test_insufficient_corpus_names_requirement(self):
        with pytest.raises(ValueError, match="tokens"):
            perplexity_by_length(tiny_model(), np.zeros(10, dtype=int), [64])

    def test_lengths_must_ascend(self, rng):
        corpus = rng.integers(0, 11, 1000)
        with pytest.raises(ValueError, match="ascending"):
            perplexity_by_length(tiny_model(), corpus, [128, 64])


class TestCheckpoint:
    def test_round_trip_forward_is_bitwise(self, tmp_path, rng):
        model = tiny_model()
        toks = rng.integers(0, 11, 24)
        logits, _ = forward(model, toks)
        path = tmp_path / "m.ssmx"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        logits2, _ = forward(loaded, toks)
        np.testing.assert_array_equal(logits, logits2)
        assert model_checksum(model) == model_checksum(loaded)
        assert loaded.cfg == model.cfg

    def test_truncated_file_is_corrupt(self, tmp_path):
        path = tmp_path / "m.ssmx"
        save_checkpoint(tiny_model(), path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_is_rejected(self, tmp_path):
        path = tmp_path / "m.ssmx"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_is_named(self, tmp_path):
        path = tmp_path / "m.ssmx"
        save_checkpoint(tiny_model(), path)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_metadata_survives(self, tmp_path):
        model = tiny_model()
        batch = copy_batches(32, 3, batch_size=2, seed=0, vocab=11)
        train(model, batch, steps=4, lr=1e-3)
        path = tmp_path / "m.ssmx"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.train_steps == 4
        assert loaded.final_loss == model.final_loss


class TestDecode:
    def test_greedy_decode_shapes_and_determinism(self, rng):
        model = tiny_model()
        prompts = rng.integers(0, 11, (3, 12))
        out1 = decode_greedy(model, prompts, 5)
        out2 = decode_greedy(model, prompts, 5)
        assert out1.shape == (3, 5)
        np.testing.assert_array_equal(out1, out2)

    def test_decode_extends_forward_argmax(self, rng):
        model = tiny_model()
        prompts = rng.integers(0, 11, (1, 9))
        step1 = decode_greedy(model, prompts, 1)
        res = forward_batch(model, prompts)
        np.testing.assert_array_equal(step1[:, 0], np.argmax(res["logits"][:, -1], axis=-1))


def test_cross_entropy_grad_matches_probabilities(rng):
    logits = rng.normal(size=(2, 5, 7))
    targets = rng.integers(0, 7, (2, 5))
    loss, dlogits = cross_entropy(logits, targets, want_grad=True)
    z = logits - logits.max(-1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    onehot = np.eye(7)[targets]
    np.testing.assert_allclose(dlogits, (probs - onehot) / 10, rtol=1e-12)
    assert loss > 0
