import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from makima.attention import (
    CONV_LAYER_ID,
    SELF_A_LAYER_ID,
    SELF_B_LAYER_ID,
    AttentionLayerSpec,
    InjectionPolicy,
    StepContext,
    ToyUNet,
    apply_injection_policy,
    cross_attention,
    inflated_self_attention,
    toy_text_embed,
)
from makima.errors import ConfigError, InjectionError
from makima.latents import AttentionCache
from makima.numerics import matmul, philox_generator, seeded_tensor, softmax_rows


def make_self_layer(channels=6, d_k=4, seed=0):
    return AttentionLayerSpec(
        SELF_A_LAYER_ID,
        "self",
        d_k,
        (4, 4),
        seeded_tensor([channels, d_k], seed, "t/wq"),
        seeded_tensor([channels, d_k], seed, "t/wk"),
        seeded_tensor([channels, channels], seed, "t/wv"),
    )


def make_cross_layer(channels=6, d_k=4, d_text=5, seed=0):
    return AttentionLayerSpec(
        2,
        "cross",
        d_k,
        (4, 4),
        seeded_tensor([channels, d_k], seed, "t/cq"),
        seeded_tensor([d_text, d_k], seed, "t/ck"),
        seeded_tensor([d_text, channels], seed, "t/cv"),
    )


def random_tokens(n=2, hw=16, c=6, seed=0):
    gen = philox_generator(seed, "attn-tokens")
    return gen.standard_normal((n, hw, c), dtype=np.float32)


class TestToyTextEmbed:
    def test_deterministic(self):
        a = toy_text_embed(["a", "red", "fox"], seed=3)
        b = toy_text_embed(["a", "red", "fox"], seed=3)
        np.testing.assert_array_equal(a.data, b.data)

    def test_single_token_change_touches_single_row(self):
        a = toy_text_embed(["a", "red", "fox"], seed=3)
        b = toy_text_embed(["a", "blue", "fox"], seed=3)
        np.testing.assert_array_equal(a.data[0], b.data[0])
        np.testing.assert_array_equal(a.data[2], b.data[2])
        assert (a.data[1] != b.data[1]).any()

    def test_attribute_spans_validated(self):
        with pytest.raises(ConfigError):
            toy_text_embed(["a", "b"], 0, attribute_spans={0: (0,), 1: (0,)})
        with pytest.raises(ConfigError):
            toy_text_embed(["a"], 0, attribute_spans={0: (5,)})

    def test_disjoint_singleton_spans(self):
        emb = toy_text_embed(["a", "b", "c"], 0, attribute_spans={0: (1,), 1: (2,)})
        ind = emb.indicator_matrix()
        np.testing.assert_array_equal(ind, [[0, 1, 0], [0, 0, 1]])

    def test_empty_prompt_rejected(self):
        with pytest.raises(ConfigError):
            toy_text_embed([], 0)


class TestInjectionPolicy:
    def test_paper_defaults_window_table(self):
        policy = InjectionPolicy(
            qk_layers=frozenset(range(4, 12)), feature_layer=4, qk_until=25, feature_until=40
        )
        assert apply_injection_policy(0, 4, policy) == (True, True)
        assert apply_injection_policy(30, 4, policy) == (False, True)
        assert apply_injection_policy(45, 4, policy) == (False, False)
        assert apply_injection_policy(45, 7, policy) == (False, False)

    def test_boundaries(self):
        policy = InjectionPolicy(
            qk_layers=frozenset(range(4, 12)), feature_layer=4, qk_until=25, feature_until=40
        )
        assert apply_injection_policy(24, 11, policy) == (True, False)
        assert apply_injection_policy(25, 11, policy) == (False, False)
        assert apply_injection_policy(39, 4, policy) == (False, True)
        assert apply_injection_policy(40, 4, policy) == (False, False)

    def test_surrogate_default_layers(self):
        policy = InjectionPolicy()
        assert apply_injection_policy(0, SELF_A_LAYER_ID, policy) == (True, False)
        assert apply_injection_policy(0, SELF_B_LAYER_ID, policy) == (True, False)
        assert apply_injection_policy(0, CONV_LAYER_ID, policy) == (False, True)

    def test_negative_step_rejected(self):
        with pytest.raises(ConfigError):
            apply_injection_policy(-1, 0, InjectionPolicy())


class TestInflatedSelfAttention:
    def test_single_frame_matches_plain_attention(self):
        layer = make_self_layer()
        tokens = random_tokens(n=1)
        scores, out = inflated_self_attention(tokens, layer, 0)
        q = matmul(tokens[0], layer.w_q)
        k = matmul(tokens[0], layer.w_k)
        v = matmul(tokens[0], layer.w_v)
        raw = matmul(q, np.ascontiguousarray(k.T))
        want = softmax_rows(raw * np.float32(1 / math.sqrt(layer.d_k)))
        np.testing.assert_array_equal(scores, want)
        np.testing.assert_array_equal(out, matmul(want, v))

    def test_zero_delta_is_identity(self):
        layer = make_self_layer()
        tokens = random_tokens(n=2)
        base_scores, base_out = inflated_self_attention(tokens, layer, 1)
        zero = np.zeros((16, 32), dtype=np.float32)
        scores, out = inflated_self_attention(tokens, layer, 1, delta=zero)
        np.testing.assert_array_equal(scores, base_scores)
        np.testing.assert_array_equal(out, base_out)

    def test_key_token_count(self):
        layer = make_self_layer()
        tokens = random_tokens(n=3, hw=16)
        scores, out = inflated_self_attention(tokens, layer, 0)
        assert scores.shape == (16, 48)
        assert out.shape == (16, 6)

    def test_identical_frames_give_identical_outputs(self):
        layer = make_self_layer()
        frame = random_tokens(n=1)[0]
        tokens = np.stack([frame, frame, frame])
        outs = [inflated_self_attention(tokens, layer, i)[1] for i in range(3)]
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(outs[0], outs[2])

    def test_rows_sum_to_one_with_large_delta(self):
        layer = make_self_layer()
        tokens = random_tokens(n=2)
        gen = philox_generator(9, "large-delta")
        delta = gen.uniform(-200, 200, (16, 32)).astype(np.float32)
        scores, _ = inflated_self_attention(tokens, layer, 0, delta=delta)
        np.testing.assert_allclose(scores.sum(axis=1), np.ones(16), atol=1e-6)

    def test_injected_shapes_checked(self):
        layer = make_self_layer()
        tokens = random_tokens(n=2)
        bad_q = np.zeros((4, layer.d_k), dtype=np.float32)
        bad_k = np.zeros((32, layer.d_k), dtype=np.float32)
        with pytest.raises(InjectionError):
            inflated_self_attention(tokens, layer, 0, injected=(bad_q, bad_k))

    def test_delta_shape_checked(self):
        layer = make_self_layer()
        tokens = random_tokens(n=2)
        with pytest.raises(InjectionError):
            inflated_self_attention(
                tokens, layer, 0, delta=np.zeros((16, 16), dtype=np.float32)
            )

    def test_injection_reproduces_source_outputs(self):
        layer = make_self_layer()
        tokens = random_tokens(n=2, seed=4)
        flat = tokens.reshape(-1, 6)
        q_src = matmul(tokens[0], layer.w_q)
        k_src = matmul(flat, layer.w_k)
        base_scores, base_out = inflated_self_attention(tokens, layer, 0)
        scores, out = inflated_self_attention(tokens, layer, 0, injected=(q_src, k_src))
        assert np.abs(scores - base_scores).max() <= 1e-4
        assert np.abs(out - base_out).max() <= 1e-4


class TestCrossAttention:
    def test_zero_delta_is_plain(self):
        layer = make_cross_layer()
        text = toy_text_embed(["x", "y", "z", "w", "v"], 1, dim=5)
        tokens = random_tokens(n=1)[0]
        base = cross_attention(tokens, text, layer)
        mod = cross_attention(tokens, text, layer, delta=np.zeros((16, 5), dtype=np.float32))
        np.testing.assert_array_equal(base[0], mod[0])

    def test_single_token_text(self):
        layer = make_cross_layer(d_text=5)
        text = toy_text_embed(["only"], 1, dim=5)
        scores, _ = cross_attention(random_tokens(n=1)[0], text, layer)
        np.testing.assert_array_equal(scores, np.ones((16, 1), dtype=np.float32))

    def test_constant_shift_invariance(self):
        layer = make_cross_layer()
        text = toy_text_embed(["x", "y", "z", "w", "v"], 1, dim=5)
        tokens = random_tokens(n=1)[0]
        base, _ = cross_attention(tokens, text, layer)
        shifted, _ = cross_attention(
            tokens, text, layer, delta=np.full((16, 5), 7.25, dtype=np.float32)
        )
        np.testing.assert_allclose(shifted, base, atol=1e-6)

    def test_kind_checked(self):
        layer = make_self_layer()
        text = toy_text_embed(["x"], 1, dim=5)
        with pytest.raises(ConfigError):
            cross_attention(random_tokens(n=1)[0], text, layer)


def make_unet(channels=6, h=4, w=4, seed=11):
    return ToyUNet(channels, h, w, seed, d_k=8, d_text=8, hidden=8)


def make_text(seed=11):
    return toy_text_embed(["a", "quiet", "scene"], seed, dim=8)


class TestToyUNet:
    def test_deterministic(self):
        unet = make_unet()
        text = make_text()
        gen = philox_generator(0, "unet-z")
        z = gen.standard_normal((2, 6, 4, 4), dtype=np.float32)
        a = unet.predict(z, StepContext(t=500, text=text))
        b = unet.predict(z, StepContext(t=500, text=text))
        np.testing.assert_array_equal(a, b)

    def test_recording_populates_cache(self):
        unet = make_unet()
        text = make_text()
        cache = AttentionCache()
        gen = philox_generator(1, "unet-z2")
        z = gen.standard_normal((2, 6, 4, 4), dtype=np.float32)
        unet.predict(z, StepContext(t=500, text=text, cache=cache, record=True))
        unet.predict(z, StepContext(t=480, text=text, cache=cache, record=True))
        cache.freeze()
        assert cache.entries_per_layer() == {SELF_A_LAYER_ID: 2, SELF_B_LAYER_ID: 2}
        assert cache.timesteps() == [480, 500]
        q, k = cache.qk(500, SELF_A_LAYER_ID)
        assert q.shape == (2, 16, 8) and k.shape == (2, 16, 8)

    def test_full_injection_reproduces_eps_bitwise(self):
        unet = make_unet()
        text = make_text()
        cache = AttentionCache()
        gen = philox_generator(2, "unet-z3")
        z = gen.standard_normal((2, 6, 4, 4), dtype=np.float32)
        eps_src = unet.predict(z, StepContext(t=500, text=text, cache=cache, record=True))
        cache.freeze()
        z_other = gen.standard_normal((2, 6, 4, 4), dtype=np.float32)
        eps_inj = unet.predict(
            z_other,
            StepContext(
                t=500,
                text=text,
                cache=cache,
                inject_qk_layers=frozenset((SELF_A_LAYER_ID, SELF_B_LAYER_ID)),
                inject_feature=True,
            ),
        )
        np.testing.assert_array_equal(eps_inj, eps_src)

    def test_thread_pool_is_bit_identical(self):
        unet = make_unet()
        text = make_text()
        gen = philox_generator(3, "unet-z4")
        z = gen.standard_normal((3, 6, 4, 4), dtype=np.float32)
        serial = unet.predict(z, StepContext(t=300, text=text))
        with ThreadPoolExecutor(max_workers=4) as pool:
            pooled = unet.predict(z, StepContext(t=300, text=text, pool=pool))
        np.testing.assert_array_equal(serial, pooled)

    def test_propagation_blends_non_keyframes(self):
        unet = make_unet()
        text = make_text()
        gen = philox_generator(4, "unet-z5")
        z = gen.standard_normal((4, 6, 4, 4), dtype=np.float32)
        rows = []
        eps = unet.predict(
            z,
            StepContext(t=700, text=text, keyframes=(0, 3), plan_rows=rows),
        )
        assert eps.shape == z.shape
        assert sorted(r.frame for r in rows) == [1, 2]
        for row in rows:
            assert {row.k1, row.k2} == {0, 3}
            assert 0.0 < row.w1 < 1.0

    def test_single_keyframe_fallback_counts(self):
        unet = make_unet()
        text = make_text()
        gen = philox_generator(5, "unet-z6")
        z = gen.standard_normal((3, 6, 4, 4), dtype=np.float32)
        counters = {}
        unet.predict(
            z, StepContext(t=700, text=text, keyframes=(1,), counters=counters)
        )
        # two non-keyframes fall back at each of the two self layers
        assert counters["single_keyframe_fallback"] == 4

    def test_latent_shape_validated(self):
        unet = make_unet()
        text = make_text()
        from makima.errors import PipelineError

        with pytest.raises(PipelineError):
            unet.predict(np.zeros((1, 6, 8, 8), dtype=np.float32), StepContext(t=1, text=text))
