"""Embedding tests: both encoders, probability appending, L1 clipping."""

import numpy as np
import pytest

from occusense.dsp import MonoClip, default_spectrogram_config, log_mel_spectrogram
from occusense.embed import (
    ClipBound,
    EmbeddingSequence,
    FrozenEncoder,
    TrainableEncoder,
    append_probability,
    clip_embedding,
    clip_rows,
    embed_chunk,
)
from occusense.errors import DataError

SR = 8000
CFG = default_spectrogram_config(SR)


def spec_of(samples):
    return log_mel_spectrogram(MonoClip(SR, samples), CFG)


class TestFrozenEncoder:
    def test_zero_spectrogram_constant_and_deterministic(self):
        enc = FrozenEncoder.for_config(CFG)
        s = spec_of(np.zeros(SR))
        e1 = embed_chunk(s, enc)
        e2 = embed_chunk(s, FrozenEncoder.for_config(CFG))
        assert e1.shape == (512,)
        np.testing.assert_array_equal(e1, e2)
        # excess-over-silence features make the all-zero second map to zero
        np.testing.assert_allclose(e1, 0.0, atol=1e-12)

    def test_same_input_identical_embedding(self):
        enc = FrozenEncoder.for_config(CFG)
        s = spec_of(np.random.default_rng(0).standard_normal(SR))
        np.testing.assert_array_equal(embed_chunk(s, enc), embed_chunk(s, enc))

    def test_one_frame_difference_changes_embedding(self):
        enc = FrozenEncoder.for_config(CFG)
        x = np.random.default_rng(1).standard_normal(SR)
        s1 = spec_of(x)
        frames2 = s1.frames.copy()
        frames2[10] += 1.0
        from occusense.dsp import Spectrogram

        s2 = Spectrogram(frames2, s1.config)
        assert not np.array_equal(embed_chunk(s1, enc), embed_chunk(s2, enc))

    def test_wrong_shape_rejected(self):
        enc = FrozenEncoder.for_config(CFG)
        with pytest.raises(DataError):
            enc.encode_batch(np.zeros((2, 3, CFG.n_mels)))

    def test_wrong_duration_rejected(self):
        enc = FrozenEncoder.for_config(CFG)
        half = log_mel_spectrogram(MonoClip(SR, np.zeros(SR // 2)), CFG)
        with pytest.raises(DataError):
            embed_chunk(half, enc)


class TestTrainableEncoder:
    def test_shapes_and_determinism(self):
        enc = TrainableEncoder((40, 32), out_dim=128)
        params = enc.init_params(seed=0)
        batch = np.random.default_rng(0).standard_normal((3, 40, 32))
        emb1, _ = enc.forward(params, batch)
        emb2, _ = enc.forward(params, batch)
        assert emb1.shape == (3, 128)
        np.testing.assert_array_equal(emb1, emb2)
        params_again = TrainableEncoder((40, 32), out_dim=128).init_params(seed=0)
        for k in params:
            np.testing.assert_array_equal(params[k], params_again[k])

    def test_bind_and_encode(self):
        enc = TrainableEncoder((40, 32), out_dim=16)
        enc.bind(enc.init_params(seed=1))
        e = enc.encode(np.random.default_rng(1).standard_normal((40, 32)))
        assert e.shape == (16,)

    def test_unbound_encode_rejected(self):
        enc = TrainableEncoder((40, 32))
        with pytest.raises(DataError):
            enc.encode_batch(np.zeros((1, 40, 32)))

    def test_too_small_input_rejected(self):
        with pytest.raises(DataError):
            TrainableEncoder((6, 6))

    def test_gradients_match_finite_differences(self):
        enc = TrainableEncoder((12, 10), out_dim=4)
        params = enc.init_params(seed=2)
        rng = np.random.default_rng(3)
        batch = rng.standard_normal((2, 12, 10))
        target = rng.standard_normal((2, 4))

        def loss_of(p):
            emb, cache = enc.forward(p, batch)
            return 0.5 * np.sum((emb - target) ** 2), cache, emb

        loss, cache, emb = loss_of(params)
        grads = enc.backward(params, cache, emb - target)
        h = 1e-6
        for name in params:
            flat_idx = rng.integers(params[name].size)
            idx = np.unravel_index(flat_idx, params[name].shape)
            orig = params[name][idx]
            params[name][idx] = orig + h
            lp = loss_of(params)[0]
            params[name][idx] = orig - h
            lm = loss_of(params)[0]
            params[name][idx] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grads[name][idx]) <= 1e-4 * max(1.0, abs(fd))

    def test_stale_cache_rejected(self):
        enc = TrainableEncoder((12, 10), out_dim=4)
        params = enc.init_params(seed=4)
        _, cache = enc.forward(params, np.zeros((1, 12, 10)))
        other = enc.init_params(seed=5)
        with pytest.raises(DataError):
            enc.backward(other, cache, np.zeros((1, 4)))


class TestAppendProbability:
    def test_definitional(self):
        np.testing.assert_array_equal(append_probability(np.array([1.0, 2.0]), 0.3), [1.0, 2.0, 0.3])

    def test_zero_probability(self):
        e = np.array([0.5, -0.5, 2.0])
        np.testing.assert_array_equal(append_probability(e, 0.0), [0.5, -0.5, 2.0, 0.0])

    def test_dimension_128_to_129(self):
        assert append_probability(np.zeros(128), 1.0).shape == (129,)

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            append_probability(np.zeros(3), 1.5)
        with pytest.raises(DataError):
            append_probability(np.zeros(3), -0.1)


class TestClipEmbedding:
    def test_scales_outside_ball(self):
        np.testing.assert_allclose(clip_embedding(np.array([3.0, -1.0]), ClipBound(2.0)), [1.5, -0.5])

    def test_inside_ball_unchanged(self):
        e = np.array([0.5, 0.5])
        np.testing.assert_array_equal(clip_embedding(e, ClipBound(2.0)), e)

    def test_zero_vector(self):
        np.testing.assert_array_equal(clip_embedding(np.zeros(4), 1.0), np.zeros(4))

    def test_norm_bound_on_random_vectors(self):
        # 10,000 random vectors, random C in (0, 10]
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            d = int(rng.integers(1, 40))
            e = rng.standard_normal(d) * rng.uniform(0.1, 20)
            c = rng.uniform(1e-3, 10.0)
            clipped = clip_embedding(e, c)
            assert np.abs(clipped).sum() <= c + 1e-12

    def test_idempotent_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            e = rng.standard_normal(16) * rng.uniform(0.1, 30)
            c = rng.uniform(0.01, 5.0)
            once = clip_embedding(e, c)
            twice = clip_embedding(once, c)
            np.testing.assert_array_equal(once, twice)

    def test_direction_preserved(self):
        rng = np.random.default_rng(2)
        e = rng.standard_normal(8) * 10
        clipped = clip_embedding(e, 1.0)
        scale = clipped[np.abs(e) > 1e-12] / e[np.abs(e) > 1e-12]
        assert scale.min() >= 0
        np.testing.assert_allclose(scale, scale[0], rtol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            clip_embedding(np.array([np.nan, 1.0]), 1.0)
        with pytest.raises(DataError):
            ClipBound(-1.0)

    def test_clip_rows_matches_vector_clip(self):
        rng = np.random.default_rng(3)
        rows = rng.standard_normal((20, 6)) * 3
        out = clip_rows(rows, 1.5)
        for i in range(20):
            np.testing.assert_allclose(out[i], clip_embedding(rows[i], 1.5), atol=1e-15)


def test_embedding_sequence_validation():
    with pytest.raises(DataError):
        EmbeddingSequence(np.zeros((3, 4)), np.zeros(2))
    with pytest.raises(DataError):
        EmbeddingSequence(np.full((2, 2), np.nan), np.zeros(2))
