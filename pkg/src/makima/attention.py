"""Inflated spatial-temporal self-attention, cross-attention and injection.

The denoiser is a fixed-weight toy UNet at a single latent resolution:
a conv-style token block (whose output is the injectable feature), two
inflated self-attention layers around one cross-attention layer, and a
bounded output head. Every weight comes from the seeded initializer, so the
whole network is a pure deterministic function of (seed, inputs).

Layer ids: 0 = conv block (feature injection), 1 and 3 = self-attention
(Q/K injection), 2 = cross-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InjectionError, PipelineError
from .latents import AttentionCache
from .modulation import ModulationConfig, build_cross_delta, build_self_delta
from .numerics import cosine_similarity, matmul, philox_generator, softmax_rows
from .propagation import (
    PlanRow,
    blend_attention,
    nearest_keyframes,
    propagation_weight_details,
)

CONV_LAYER_ID = 0
SELF_A_LAYER_ID = 1
CROSS_LAYER_ID = 2
SELF_B_LAYER_ID = 3
SELF_LAYER_IDS = (SELF_A_LAYER_ID, SELF_B_LAYER_ID)

# residual branches are damped so repeated adds stay inside tanh's active range
RESIDUAL_SCALE = np.float32(0.5)

# noise predictions are kept small: DDIM amplifies early-step prediction
# differences by sqrt(alpha_bar_0 / alpha_bar_T) ~ 150x, so an O(1) head
# would blow edited latents far past the source magnitude
EPS_SCALE = np.float32(0.1)


@dataclass
class AttentionLayerSpec:
    """One attention layer: projection weights plus bookkeeping."""

    layer_id: int
    kind: str  # "self" | "cross"
    d_k: int
    resolution: tuple[int, int]
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        if self.kind not in ("self", "cross"):
            raise ConfigError(f"attention kind must be self|cross, got {self.kind!r}")
        if self.d_k <= 0:
            raise ConfigError("d_k must be positive")
        if self.w_q.shape[1] != self.d_k or self.w_k.shape[1] != self.d_k:
            raise ConfigError("projection widths do not match d_k")


@dataclass
class TextEmbedding:
    """Token embeddings plus the attribute-token index sets.

    ``attribute_spans`` maps attribute index m to the token indices of that
    attribute's words; the spans must be disjoint and in range.
    """

    tokens: tuple[str, ...]
    dim: int
    data: np.ndarray
    attribute_spans: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[int] = set()
        length = len(self.tokens)
        for m, span in self.attribute_spans.items():
            for idx in span:
                if not 0 <= idx < length:
                    raise ConfigError(f"attribute {m} token index {idx} out of range")
                if idx in seen:
                    raise ConfigError(f"attribute spans overlap at token {idx}")
                seen.add(idx)

    def indicator_matrix(self) -> np.ndarray:
        """Binary token indicators [M, L], rows ordered by attribute index."""
        length = len(self.tokens)
        m_count = len(self.attribute_spans)
        if sorted(self.attribute_spans) != list(range(m_count)):
            raise ConfigError("attribute indices must be dense from 0")
        out = np.zeros((m_count, length), dtype=np.float32)
        for m in range(m_count):
            out[m, list(self.attribute_spans[m])] = 1.0
        return out


def toy_text_embed(
    prompt: list[str],
    seed: int,
    dim: int = 16,
    attribute_spans: dict[int, tuple[int, ...]] | None = None,
) -> TextEmbedding:
    """Deterministic per-token embeddings.

    Each distinct token string maps to its own seeded vector (unit-scale,
    independent of position), so prompts differing in one token differ in
    exactly that row.
    """
    if not prompt:
        raise ConfigError("prompt must contain at least one token")
    rows = np.empty((len(prompt), dim), dtype=np.float32)
    scale = np.float32(1.0 / math.sqrt(dim))
    for idx, token in enumerate(prompt):
        gen = philox_generator(seed, f"text-token/{token}")
        rows[idx] = gen.standard_normal(dim, dtype=np.float32) * scale
    return TextEmbedding(
        tokens=tuple(prompt),
        dim=dim,
        data=rows,
        attribute_spans=dict(attribute_spans or {}),
    )


@dataclass(frozen=True)
class InjectionPolicy:
    """Which layers receive cached source values, and for how many steps."""

    qk_layers: frozenset[int] = frozenset(SELF_LAYER_IDS)
    feature_layer: int = CONV_LAYER_ID
    qk_until: int = 25
    feature_until: int = 40


def apply_injection_policy(
    step_index: int, layer_id: int, policy: InjectionPolicy
) -> tuple[bool, bool]:
    """(inject_qk, inject_feature) for a denoising step and layer."""
    if step_index < 0:
        raise ConfigError(f"step index must be nonnegative, got {step_index}")
    inject_qk = layer_id in policy.qk_layers and step_index < policy.qk_until
    inject_feature = layer_id == policy.feature_layer and step_index < policy.feature_until
    return inject_qk, inject_feature


def _as_tokens(features) -> np.ndarray:
    if hasattr(features, "tokens"):
        features = features.tokens()
    tokens = np.ascontiguousarray(features, dtype=np.float32)
    if tokens.ndim != 3:
        raise ConfigError(f"features must be [N, hw, C], got shape {tokens.shape}")
    return tokens


def _finish_attend(
    raw: np.ndarray, v: np.ndarray, delta: np.ndarray | None, d_k: int
) -> tuple[np.ndarray, np.ndarray]:
    """softmax((raw + delta) / sqrt(d_k)) @ v on precomputed raw scores."""
    if delta is not None:
        delta = np.asarray(delta, dtype=np.float32)
        if delta.shape != raw.shape:
            raise InjectionError(
                f"modulation delta shape {delta.shape} does not match scores {raw.shape}"
            )
        raw = raw + delta
    scores = softmax_rows(raw * np.float32(1.0 / math.sqrt(d_k)))
    return scores, matmul(scores, v)


def _attend(
    q: np.ndarray, k_t: np.ndarray, v: np.ndarray, delta: np.ndarray | None, d_k: int
) -> tuple[np.ndarray, np.ndarray]:
    """softmax((q k^T + delta) / sqrt(d_k)) @ v with k pre-transposed."""
    return _finish_attend(matmul(q, k_t), v, delta, d_k)


def inflated_self_attention(
    features,
    layer: AttentionLayerSpec,
    frame_i: int,
    delta: np.ndarray | None = None,
    injected: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One frame's queries against keys/values from every frame.

    ``injected``, when present, is (Q_src [hw, d_k], K_src [N*hw, d_k]) and
    replaces the current projections before scoring; values always come
    from the current features. Returns (scores [hw, N*hw], output [hw, C]).
    """
    if layer.kind != "self":
        raise ConfigError("inflated_self_attention requires a self-attention layer")
    tokens = _as_tokens(features)
    n, hw, _ = tokens.shape
    if not 0 <= frame_i < n:
        raise ConfigError(f"frame index {frame_i} outside [0, {n})")
    flat = tokens.reshape(n * hw, -1)
    v = matmul(flat, layer.w_v)
    if injected is not None:
        q, k = injected
        q = np.ascontiguousarray(q, dtype=np.float32)
        k = np.ascontiguousarray(k, dtype=np.float32)
        if q.shape != (hw, layer.d_k) or k.shape != (n * hw, layer.d_k):
            raise InjectionError(
                f"injected Q/K shapes {q.shape}/{k.shape} do not match "
                f"({hw}, {layer.d_k})/({n * hw}, {layer.d_k})"
            )
    else:
        q = matmul(tokens[frame_i], layer.w_q)
        k = matmul(flat, layer.w_k)
    k_t = np.ascontiguousarray(k.T)
    return _attend(q, k_t, v, delta, layer.d_k)


def cross_attention(
    frame_tokens,
    text: TextEmbedding,
    layer: AttentionLayerSpec,
    delta: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Latent queries against text keys/values.

    Returns (scores [hw, L], output [hw, C]).
    """
    if layer.kind != "cross":
        raise ConfigError("cross_attention requires a cross-attention layer")
    tokens = np.ascontiguousarray(frame_tokens, dtype=np.float32)
    if tokens.ndim != 2:
        raise ConfigError(f"frame tokens must be [hw, C], got shape {tokens.shape}")
    q = matmul(tokens, layer.w_q)
    k_t = np.ascontiguousarray(matmul(text.data, layer.w_k).T)
    v = matmul(text.data, layer.w_v)
    return _attend(q, k_t, v, delta, layer.d_k)


@dataclass
class StepContext:
    """Everything one denoiser evaluation needs beyond (z, t).

    ``keyframes`` of None means every frame computes its own self-attention
    (the inversion path); otherwise non-keyframes receive blended keyframe
    outputs. Recording and injection are mutually exclusive in practice:
    inversion records, denoising injects.
    """

    t: int
    text: TextEmbedding
    keyframes: tuple[int, ...] | None = None
    cache: AttentionCache | None = None
    record: bool = False
    inject_qk_layers: frozenset[int] = frozenset()
    inject_feature: bool = False
    modulate_self: bool = False
    modulate_cross: bool = False
    mod_config: ModulationConfig | None = None
    masks: np.ndarray | None = None  # [M, N, hw] at the attention resolution
    sigma_mode: str = "logistic"
    counters: dict | None = None
    diagnostics: dict | None = None
    plan_rows: list[PlanRow] | None = None
    attn_sink: dict | None = None
    pool: object = None

    def bump(self, name: str) -> None:
        if self.counters is not None:
            self.counters[name] = self.counters.get(name, 0) + 1

    def diag_extend(self, name: str, values) -> None:
        if self.diagnostics is not None:
            self.diagnostics.setdefault(name, []).extend(values)


class ToyUNet:
    """Seeded fixed-weight noise predictor exercising every injection site.

    Structure per evaluation: token projection residual conv block, inflated
    self-attention, cross-attention, second inflated self-attention, tanh
    head. All weights are deterministic functions of the seed.
    """

    def __init__(
        self,
        channels: int,
        height: int,
        width: int,
        seed: int,
        d_k: int = 16,
        d_text: int = 16,
        hidden: int = 16,
    ):
        if hidden % 2:
            raise ConfigError("hidden width must be even for the time embedding")
        from .numerics import seeded_tensor

        self.channels = channels
        self.height = height
        self.width = width
        self.d_k = d_k
        self.d_text = d_text
        self.hidden = hidden
        self.seed = seed
        res = (height, width)
        self.conv_w1 = seeded_tensor([channels, hidden], seed, "unet/conv/w1")
        self.conv_w2 = seeded_tensor([hidden, channels], seed, "unet/conv/w2")
        self.head_w = seeded_tensor([channels, channels], seed, "unet/head/w")
        self.self_a = AttentionLayerSpec(
            SELF_A_LAYER_ID,
            "self",
            d_k,
            res,
            seeded_tensor([channels, d_k], seed, "unet/self_a/wq"),
            seeded_tensor([channels, d_k], seed, "unet/self_a/wk"),
            seeded_tensor([channels, channels], seed, "unet/self_a/wv"),
        )
        self.cross = AttentionLayerSpec(
            CROSS_LAYER_ID,
            "cross",
            d_k,
            res,
            seeded_tensor([channels, d_k], seed, "unet/cross/wq"),
            seeded_tensor([d_text, d_k], seed, "unet/cross/wk"),
            seeded_tensor([d_text, channels], seed, "unet/cross/wv"),
        )
        self.self_b = AttentionLayerSpec(
            SELF_B_LAYER_ID,
            "self",
            d_k,
            res,
            seeded_tensor([channels, d_k], seed, "unet/self_b/wq"),
            seeded_tensor([channels, d_k], seed, "unet/self_b/wk"),
            seeded_tensor([channels, channels], seed, "unet/self_b/wv"),
        )

    @property
    def attention_layers(self) -> list[AttentionLayerSpec]:
        return [self.self_a, self.cross, self.self_b]

    def time_embedding(self, t: int) -> np.ndarray:
        """Smooth bounded embedding of the train timestep, width ``hidden``."""
        t_hat = t / 1000.0
        half = self.hidden // 2
        freqs = np.arange(1, half + 1, dtype=np.float64)
        emb = np.concatenate(
            [np.sin(2.0 * np.pi * freqs * t_hat), np.cos(2.0 * np.pi * freqs * t_hat)]
        )
        return (0.5 * emb).astype(np.float32)

    def _map_frames(self, fn, n: int, pool) -> None:
        if pool is None:
            for i in range(n):
                fn(i)
        else:
            list(pool.map(fn, range(n)))

    def _conv_block(self, tokens: np.ndarray, t: int, ctx: StepContext) -> np.ndarray:
        n, hw, c = tokens.shape
        temb = self.time_embedding(t)
        out = np.empty_like(tokens)

        def one(i: int) -> None:
            act = np.tanh(matmul(tokens[i], self.conv_w1) + temb)
            out[i] = tokens[i] + RESIDUAL_SCALE * matmul(act, self.conv_w2)

        self._map_frames(one, n, ctx.pool)
        if ctx.inject_feature:
            if ctx.cache is None:
                raise InjectionError("feature injection requested without a cache")
            cached = ctx.cache.features(t)
            if cached.shape != out.shape:
                raise InjectionError(
                    f"cached features {cached.shape} do not match {out.shape}"
                )
            out = cached
        if ctx.record:
            if ctx.cache is None:
                raise PipelineError("recording requested without a cache sink")
            ctx.cache.record_features(t, out)
        return out

    def _self_layer(
        self, layer: AttentionLayerSpec, x: np.ndarray, ctx: StepContext, plan: bool
    ) -> np.ndarray:
        n, hw, c = x.shape
        flat = x.reshape(n * hw, c)
        inject = layer.layer_id in ctx.inject_qk_layers
        if inject:
            if ctx.cache is None:
                raise InjectionError("Q/K injection requested without a cache")
            q_src, k_src = ctx.cache.qk(ctx.t, layer.layer_id)
            if q_src.shape != (n, hw, layer.d_k):
                raise InjectionError(
                    f"cached Q shape {q_src.shape} does not match ({n}, {hw}, {layer.d_k})"
                )
            q_all = q_src
            k = k_src.reshape(n * hw, layer.d_k)
        else:
            q_all = matmul(flat, layer.w_q).reshape(n, hw, layer.d_k)
            k = matmul(flat, layer.w_k)
        if ctx.record:
            ctx.cache.record_qk(
                ctx.t, layer.layer_id, q_all, k.reshape(n, hw, layer.d_k)
            )
        v = matmul(flat, layer.w_v)
        k_t = np.ascontiguousarray(k.T)
        keyframes = tuple(range(n)) if ctx.keyframes is None else ctx.keyframes
        outs = np.empty((n, hw, c), dtype=np.float32)
        modulate = (
            ctx.modulate_self and ctx.masks is not None and ctx.masks.shape[0] > 0
        )
        alphas: list[float] = []
        for i in keyframes:
            raw = matmul(q_all[i], k_t)
            delta = None
            if modulate:
                delta, frame_alphas = build_self_delta(
                    raw, ctx.masks, i, ctx.mod_config, ctx.t, ctx.counters
                )
                alphas.extend(frame_alphas)
            scores, out_i = _finish_attend(raw, v, delta, layer.d_k)
            outs[i] = out_i
            if ctx.attn_sink is not None:
                ctx.attn_sink.setdefault(layer.layer_id, {})[i] = scores
        if alphas:
            ctx.diag_extend("alpha_self", alphas)

        non_keyframes = [i for i in range(n) if i not in keyframes]
        for i in non_keyframes:
            if len(keyframes) < 2:
                ctx.bump("single_keyframe_fallback")
                outs[i] = outs[keyframes[0]].copy()
                if plan and ctx.plan_rows is not None:
                    k0 = keyframes[0]
                    ctx.plan_rows.append(
                        PlanRow(i, k0, k0, 1.0, abs(i - k0), abs(i - k0), 1.0, 1.0, 0.5)
                    )
                continue
            k1, k2, d1, d2 = nearest_keyframes(i, keyframes)
            sim1 = cosine_similarity(x[i].ravel(), x[k1].ravel())
            sim2 = cosine_similarity(x[i].ravel(), x[k2].ravel())
            w1, w_temp, fallback = propagation_weight_details(
                d1, d2, sim1, sim2, ctx.sigma_mode
            )
            if fallback:
                ctx.bump("zero_denominator_fallback")
            outs[i] = blend_attention(outs[k1], outs[k2], w1)
            if plan and ctx.plan_rows is not None:
                ctx.plan_rows.append(PlanRow(i, k1, k2, w1, d1, d2, sim1, sim2, w_temp))
        return x + RESIDUAL_SCALE * outs

    def _cross_layer(self, x: np.ndarray, ctx: StepContext) -> np.ndarray:
        n, hw, c = x.shape
        layer = self.cross
        k_t = np.ascontiguousarray(matmul(ctx.text.data, layer.w_k).T)
        v = matmul(ctx.text.data, layer.w_v)
        indicators = ctx.text.indicator_matrix()
        modulate = (
            ctx.modulate_cross
            and ctx.masks is not None
            and indicators.shape[0] > 0
            and indicators.shape[0] == ctx.masks.shape[0]
        )
        outs = np.empty((n, hw, c), dtype=np.float32)
        # per-frame results are merged in frame order afterwards so counters
        # and diagnostics stay identical under any thread count
        frame_alphas: list[list[float]] = [[] for _ in range(n)]
        frame_counters: list[dict] = [{} for _ in range(n)]
        frame_scores: list[np.ndarray | None] = [None] * n

        def one(i: int) -> None:
            raw = matmul(matmul(x[i], layer.w_q), k_t)
            delta = None
            if modulate:
                delta, alphas_i = build_cross_delta(
                    raw, ctx.masks[:, i, :], indicators, ctx.mod_config, ctx.t,
                    frame_counters[i],
                )
                frame_alphas[i] = alphas_i
            scores, out_i = _finish_attend(raw, v, delta, layer.d_k)
            outs[i] = out_i
            if ctx.attn_sink is not None:
                frame_scores[i] = scores

        self._map_frames(one, n, ctx.pool)
        merged = [a for alphas_i in frame_alphas for a in alphas_i]
        if merged:
            ctx.diag_extend("alpha_cross", merged)
        if ctx.counters is not None:
            for local in frame_counters:
                for name, value in local.items():
                    ctx.counters[name] = ctx.counters.get(name, 0) + value
        if ctx.attn_sink is not None:
            for i in range(n):
                if frame_scores[i] is not None:
                    ctx.attn_sink.setdefault(layer.layer_id, {})[i] = frame_scores[i]
        return x + RESIDUAL_SCALE * outs

    def forward_tokens(self, tokens: np.ndarray, ctx: StepContext) -> np.ndarray:
        """Noise prediction on token-view latents [N, hw, C]."""
        h1 = self._conv_block(tokens, ctx.t, ctx)
        h2 = self._self_layer(self.self_a, h1, ctx, plan=True)
        h3 = self._cross_layer(h2, ctx)
        h4 = self._self_layer(self.self_b, h3, ctx, plan=False)
        n = tokens.shape[0]
        eps = np.empty_like(tokens)

        def head(i: int) -> None:
            eps[i] = EPS_SCALE * matmul(np.tanh(h4[i]), self.head_w)

        self._map_frames(head, n, ctx.pool)
        return eps

    def predict(self, z: np.ndarray, ctx: StepContext) -> np.ndarray:
        """Noise prediction on latents [N, C, h, w]."""
        n, c, h, w = z.shape
        if (h, w) != (self.height, self.width) or c != self.channels:
            raise PipelineError(
                f"latent shape {z.shape} does not match the denoiser "
                f"({self.channels}, {self.height}, {self.width})"
            )
        tokens = np.ascontiguousarray(z.reshape(n, c, h * w).transpose(0, 2, 1))
        eps_tokens = self.forward_tokens(tokens, ctx)
        return np.ascontiguousarray(eps_tokens.transpose(0, 2, 1)).reshape(n, c, h, w)
