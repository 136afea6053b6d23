import numpy as np
import pytest

from makima.attention import toy_text_embed
from makima.errors import DegenerateVectorError
from makima.latents import LatentVideo
from makima.metrics import MetricResult, ToyEmbedder, metric_suite
from makima.numerics import philox_generator


class TestMetricSuite:
    def test_identical_frames_full_coherence(self):
        frame = np.array([1.0, 2.0, 3.0])
        frames = np.tile(frame, (4, 1))
        result = metric_suite(frames, np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
        assert result.clip_f_like == pytest.approx(1.0)
        assert not result.clip_f_degenerate

    def test_target_equals_frames(self):
        frame = np.array([0.5, -1.0, 2.0])
        frames = np.tile(frame, (3, 1))
        result = metric_suite(frames, np.array([1.0, 1.0, 1.0]), frame.copy())
        assert result.clip_t_like == pytest.approx(1.0)
        assert result.frame_acc_like == 1.0

    def test_single_frame_flagged(self):
        frames = np.array([[1.0, 0.0]])
        result = metric_suite(frames, np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert result.clip_f_like == 1.0
        assert result.clip_f_degenerate

    def test_zero_norm_rejected(self):
        frames = np.array([[0.0, 0.0]])
        with pytest.raises(DegenerateVectorError):
            metric_suite(frames, np.array([0.0, 1.0]), np.array([1.0, 0.0]))

    def test_ranges(self):
        gen = philox_generator(0, "metric-range")
        frames = gen.standard_normal((6, 8)) + 0.01
        src = gen.standard_normal(8)
        tgt = gen.standard_normal(8)
        result = metric_suite(frames, src, tgt)
        assert -1.0 <= result.clip_t_like <= 1.0
        assert -1.0 <= result.clip_f_like <= 1.0
        assert 0.0 <= result.frame_acc_like <= 1.0


class TestToyEmbedder:
    def test_deterministic(self):
        gen = philox_generator(1, "embedder")
        video = LatentVideo(gen.standard_normal((3, 4, 4, 4), dtype=np.float32))
        a = ToyEmbedder(7, channels=4, text_dim=8)
        b = ToyEmbedder(7, channels=4, text_dim=8)
        np.testing.assert_array_equal(a.embed_frames(video), b.embed_frames(video))

    def test_prompt_embedding_shape(self):
        text = toy_text_embed(["some", "words"], 0, dim=8)
        emb = ToyEmbedder(7, channels=4, text_dim=8)
        assert emb.embed_prompt(text).shape == (12,)
