"""End-to-end edit orchestration: config, manifest, inversion, denoising.

The flow mirrors the editing pipeline: encode the source frames, invert
them deterministically under the source prompt while caching attention and
conv features, then denoise under the target prompt with source injection,
mask-guided modulation (self-attention on keyframes, cross-attention on
every frame) and keyframe feature propagation, finishing with guidance
combination per step. Everything is a pure function of (files, config), so
identical runs produce byte-identical artifacts regardless of the thread
cap in MAKIMA_THREADS.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    CONV_LAYER_ID,
    SELF_LAYER_IDS,
    InjectionPolicy,
    StepContext,
    ToyUNet,
    apply_injection_policy,
    toy_text_embed,
)
from .errors import ArtifactIOError, ConfigError, ManifestError
from .images import block_downscale, read_pgm_mask, read_ppm
from .latents import (
    AttentionCache,
    LatentVideo,
    cfg_combine,
    ddim_invert,
    ddim_sample_step,
    encode_frames,
    make_schedule,
    save_latents,
)
from .metrics import Embedder, MetricResult, ToyEmbedder, metric_suite
from .modulation import MaskSet, ModulationConfig, mask_area_ratio
from .propagation import (
    SIGMA_MODES,
    KeyframePlan,
    StepPlan,
    diversity_ranking,
    per_step_keyframe_rotation,
)

log = logging.getLogger("makima")

NULL_TOKEN = "<null>"
MAGIC_ATTENTION = b"MKAT"

COUNTER_NAMES = (
    "empty_mask_attribute",
    "overlapping_supports",
    "single_keyframe_fallback",
    "zero_denominator_fallback",
    "non_bilevel_masks",
)


@dataclass(frozen=True)
class Profile:
    """Model dimensions tied to a working scale."""

    frame_size: int
    patch: int
    channels: int
    d_k: int
    d_text: int
    hidden: int


PROFILES = {
    "desk": Profile(frame_size=64, patch=8, channels=8, d_k=16, d_text=16, hidden=16),
    "paper": Profile(frame_size=512, patch=8, channels=4, d_k=16, d_text=16, hidden=16),
}


@dataclass
class AttributeEdit:
    """One intended edit: a source span rewritten to a target span."""

    source: str
    target: str


@dataclass
class EditConfig:
    manifest: str
    source_prompt: str
    target_prompt: str
    edits: list[AttributeEdit]
    sample_steps: int = 50
    guidance: float = 7.5
    gamma_self: float = 0.1
    gamma_cross: float = 1.0
    qk_injection_until: int = 25
    feature_injection_until: int = 40
    keyframes_per_step: int = 3
    seed: int = 0
    sigma_mode: str = "logistic"
    output_dir: str = "out"
    profile: str = "desk"
    modulation: bool = True
    injection: bool = True
    propagation: bool = True
    dump_attention: bool = False

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if not 1 <= self.sample_steps <= 1000:
            raise ConfigError(f"sample_steps {self.sample_steps} outside [1, 1000]")
        if self.guidance < 0:
            raise ConfigError("guidance must be nonnegative")
        if self.gamma_self < 0 or self.gamma_cross < 0:
            raise ConfigError("modulation scales must be nonnegative")
        if self.qk_injection_until < 0 or self.feature_injection_until < 0:
            raise ConfigError("injection windows must be nonnegative")
        if self.keyframes_per_step < 1:
            raise ConfigError("keyframes_per_step must be at least 1")
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}")
        if not self.source_prompt.split() or not self.target_prompt.split():
            raise ConfigError("prompts must be nonempty")
        if not self.edits:
            raise ConfigError("at least one attribute edit is required")


def load_config(path) -> EditConfig:
    """Parse a JSON config; relative paths resolve against the file's folder."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ArtifactIOError(f"cannot read config: {exc}", path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f for f in EditConfig.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = {"manifest", "source_prompt", "target_prompt", "edits"} - set(raw)
    if missing:
        raise ConfigError(f"missing config keys: {sorted(missing)}")
    edits_raw = raw.pop("edits")
    if not isinstance(edits_raw, list):
        raise ConfigError("edits must be a list of {source, target} objects")
    edits = []
    for entry in edits_raw:
        if not isinstance(entry, dict) or set(entry) != {"source", "target"}:
            raise ConfigError(f"bad edit entry: {entry!r}")
        edits.append(AttributeEdit(source=str(entry["source"]), target=str(entry["target"])))
    config = EditConfig(edits=edits, **raw)
    base = path.parent
    config.manifest = str((base / config.manifest).resolve())
    config.output_dir = str((base / config.output_dir).resolve())
    config.validate()
    return config


@dataclass
class Manifest:
    frames_dir: Path
    attributes: list[tuple[int, str, str]]  # (index, target span, mask pattern)


def _parse_manifest(path: Path) -> Manifest:
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read manifest: {exc}", path=str(path)) from exc
    frames_dir: Path | None = None
    attributes: list[tuple[int, str, str]] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("frames:"):
            frames_dir = (path.parent / line.split(":", 1)[1].strip()).resolve()
            continue
        if line.startswith("attribute"):
            rest = line[len("attribute"):].strip()
            try:
                index_str, rest = rest.split(None, 1)
                index = int(index_str)
                if not rest.startswith('"'):
                    raise ValueError("missing opening quote")
                close = rest.index('"', 1)
                span = rest[1:close]
                pattern = rest[close + 1 :].lstrip()
                if not pattern.startswith(":"):
                    raise ValueError("missing colon after span")
                pattern = pattern[1:].strip()
            except ValueError as exc:
                raise ManifestError(f"bad attribute line {lineno}: {line!r} ({exc})") from exc
            if not span.split() or not pattern:
                raise ManifestError(f"empty span or pattern on line {lineno}")
            attributes.append((index, span, pattern))
            continue
        raise ManifestError(f"unrecognized manifest line {lineno}: {line!r}")
    if frames_dir is None:
        raise ManifestError("manifest is missing a 'frames:' entry")
    indices = sorted(idx for idx, _, _ in attributes)
    if indices != list(range(len(attributes))):
        raise ManifestError(f"attribute indices must be dense from 0, got {indices}")
    attributes.sort(key=lambda item: item[0])
    return Manifest(frames_dir=frames_dir, attributes=attributes)


def load_manifest(path) -> tuple[np.ndarray, MaskSet, list[str], dict]:
    """Load frames and per-attribute masks named by a manifest file.

    Returns (frames [N,H,W,3] float32 in [0,1], MaskSet, target spans,
    counters). Missing files raise an I/O error naming the entry; masks
    containing grays other than 0/255 are thresholded and counted.
    """
    path = Path(path)
    manifest = _parse_manifest(path)
    if not manifest.frames_dir.is_dir():
        raise ArtifactIOError(
            f"frames directory does not exist: {manifest.frames_dir}",
            path=str(manifest.frames_dir),
        )
    frame_paths = sorted(manifest.frames_dir.glob("*.ppm"))
    if not frame_paths:
        raise ManifestError(f"no .ppm frames found in {manifest.frames_dir}")
    frames_u8 = []
    for fp in frame_paths:
        frames_u8.append(read_ppm(fp))
        if frames_u8[-1].shape != frames_u8[0].shape:
            raise ManifestError(
                f"frame {fp.name} shape {frames_u8[-1].shape} differs from "
                f"{frame_paths[0].name} {frames_u8[0].shape}"
            )
    frames = np.stack(frames_u8).astype(np.float32) / np.float32(255.0)
    n = frames.shape[0]
    counters = {"non_bilevel_masks": 0}
    mask_stack = []
    spans = []
    for index, span, pattern in manifest.attributes:
        per_frame = []
        for i in range(n):
            entry = pattern.replace("{i}", str(i))
            mask_path = path.parent / entry
            if not mask_path.is_file():
                raise ArtifactIOError(
                    f"manifest attribute {index} references missing mask {entry!r}",
                    path=str(mask_path),
                )
            mask, bilevel = read_pgm_mask(mask_path)
            if not bilevel:
                counters["non_bilevel_masks"] += 1
                log.warning("mask %s is not bilevel; thresholded at 128", mask_path)
            if mask.shape != frames.shape[1:3]:
                raise ManifestError(
                    f"mask {entry} shape {mask.shape} does not match frames "
                    f"{frames.shape[1:3]}"
                )
            per_frame.append(mask)
        mask_stack.append(np.stack(per_frame))
        spans.append(span)
    return frames, MaskSet(np.stack(mask_stack)), spans, counters


def _find_span(prompt_tokens: list[str], span: str, what: str) -> tuple[int, ...]:
    """Token indices of the first occurrence of span as a contiguous run."""
    words = span.split()
    limit = len(prompt_tokens) - len(words)
    for start in range(limit + 1):
        if prompt_tokens[start : start + len(words)] == words:
            return tuple(range(start, start + len(words)))
    raise ConfigError(f"{what} span {span!r} not found in prompt {' '.join(prompt_tokens)!r}")


@dataclass
class EditReport:
    clip_t_like: float
    clip_f_like: float
    frame_acc_like: float
    clip_f_degenerate: bool
    runtime_seconds: float
    frames: int
    sample_steps: int
    seed: int
    guidance: float
    counters: dict[str, int]
    omega_per_attribute: list[float]
    alpha_self_range: list[tuple[int, float, float]] = field(default_factory=list)
    alpha_cross_range: list[tuple[int, float, float]] = field(default_factory=list)

    def lines(self) -> list[str]:
        """Deterministic key=value serialization (one key per line)."""
        out = [
            "runtime_note=covers inversion and denoising only",
            f"runtime_seconds={self.runtime_seconds!r}",
            f"clip_t_like={self.clip_t_like!r}",
            f"clip_f_like={self.clip_f_like!r}",
            f"clip_f_degenerate={int(self.clip_f_degenerate)}",
            f"frame_acc_like={self.frame_acc_like!r}",
            f"frames={self.frames}",
            f"sample_steps={self.sample_steps}",
            f"seed={self.seed}",
            f"guidance={self.guidance!r}",
        ]
        for name in COUNTER_NAMES:
            out.append(f"counter.{name}={self.counters.get(name, 0)}")
        for m, omega in enumerate(self.omega_per_attribute):
            out.append(f"omega.attr{m}={omega!r}")
        for step, lo, hi in self.alpha_self_range:
            out.append(f"step{step:03d}.alpha_self_min={lo!r}")
            out.append(f"step{step:03d}.alpha_self_max={hi!r}")
        for step, lo, hi in self.alpha_cross_range:
            out.append(f"step{step:03d}.alpha_cross_min={lo!r}")
            out.append(f"step{step:03d}.alpha_cross_max={hi!r}")
        return out


def _thread_pool() -> ThreadPoolExecutor | None:
    raw = os.environ.get("MAKIMA_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MAKIMA_THREADS must be an integer, got {raw!r}") from exc
    if threads < 1:
        raise ConfigError(f"MAKIMA_THREADS must be >= 1, got {threads}")
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else None


def _prepare_frames(frames: np.ndarray, profile: Profile) -> np.ndarray:
    """Normalize frame resolution for the working profile.

    Frames larger than the profile size are block-averaged down when evenly
    divisible; smaller frames are accepted as long as the patch grid fits.
    """
    h = frames.shape[1]
    w = frames.shape[2]
    target = profile.frame_size
    if h != w:
        raise ConfigError(f"frames must be square, got {h}x{w}")
    if h > target:
        if h % target:
            raise ConfigError(f"cannot downscale {h}px frames to {target}px")
        scaled = [block_downscale(frame, target, target) for frame in frames]
        return np.stack(scaled).astype(np.float32)
    if h % profile.patch or (h // profile.patch) < 4:
        raise ConfigError(
            f"frame size {h} must be a multiple of {profile.patch} with at "
            f"least 4 patches per side"
        )
    return frames


def _dump_attention_maps(out_dir: Path, step_index: int, sink: dict) -> None:
    """Write per-layer score matrices recorded at one step as MKAT files.

    Layout mirrors the latent format: magic, then u32 layer_id, frames,
    rows, cols, then for each recorded frame a u32 frame index and its
    float32 score matrix.
    """
    for layer_id in sorted(sink):
        per_frame = sink[layer_id]
        frames = sorted(per_frame)
        rows, cols = per_frame[frames[0]].shape
        blob = bytearray()
        blob += MAGIC_ATTENTION
        blob += struct.pack("<IIII", layer_id, len(frames), rows, cols)
        for i in frames:
            blob += struct.pack("<I", i)
            blob += per_frame[i].astype("<f4").tobytes()
        _atomic_write_bytes(out_dir / f"attn_step{step_index:03d}_layer{layer_id}.mkat", bytes(blob))


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write artifact: {exc}", path=str(path)) from exc


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


@dataclass
class PreparedEdit:
    """Deterministic materialization of one edit job's inputs and models."""

    config: EditConfig
    profile: Profile
    frames: np.ndarray
    masks: MaskSet
    masks_at_res: np.ndarray
    z0: LatentVideo
    unet: ToyUNet
    schedule: object
    text_src: object
    text_tgt: object
    text_null: object
    counters: dict[str, int]


def prepare_inputs(config: EditConfig) -> PreparedEdit:
    """Load files and build the seeded models an edit run will use.

    Pure function of (files, config); :func:`run_edit` goes through this, so
    callers that need the same latents/denoiser/text objects (probes, tests)
    can construct them identically.
    """
    config.validate()
    profile = PROFILES[config.profile]
    frames, masks, manifest_spans, counters = load_manifest(config.manifest)
    counters = {name: counters.get(name, 0) for name in COUNTER_NAMES}
    frames = _prepare_frames(frames, profile)
    n = frames.shape[0]

    if len(config.edits) != masks.attributes:
        raise ConfigError(
            f"config lists {len(config.edits)} edits but the manifest has "
            f"{masks.attributes} attributes"
        )
    if masks.frames != n:
        raise ManifestError(f"masks cover {masks.frames} frames, video has {n}")
    for m, (edit, span) in enumerate(zip(config.edits, manifest_spans)):
        if edit.target != span:
            raise ConfigError(
                f"edit {m} target span {edit.target!r} does not match manifest "
                f"span {span!r}"
            )

    src_tokens = config.source_prompt.split()
    tgt_tokens = config.target_prompt.split()
    attribute_spans = {}
    for m, edit in enumerate(config.edits):
        _find_span(src_tokens, edit.source, f"edit {m} source")
        attribute_spans[m] = _find_span(tgt_tokens, edit.target, f"edit {m} target")

    text_src = toy_text_embed(src_tokens, config.seed, profile.d_text)
    text_tgt = toy_text_embed(tgt_tokens, config.seed, profile.d_text, attribute_spans)
    text_null = toy_text_embed([NULL_TOKEN], config.seed, profile.d_text)

    z0 = encode_frames(frames, profile.patch, profile.channels, config.seed)
    unet = ToyUNet(
        profile.channels, z0.height, z0.width, config.seed,
        d_k=profile.d_k, d_text=profile.d_text, hidden=profile.hidden,
    )
    return PreparedEdit(
        config=config,
        profile=profile,
        frames=frames,
        masks=masks,
        masks_at_res=masks.at_resolution(z0.height, z0.width),
        z0=z0,
        unet=unet,
        schedule=make_schedule(config.sample_steps),
        text_src=text_src,
        text_tgt=text_tgt,
        text_null=text_null,
        counters=counters,
    )


def run_edit(
    config: EditConfig, embedder: Embedder | None = None
) -> tuple[LatentVideo, EditReport, KeyframePlan]:
    """Execute the full edit and return (edited latents, report, plan).

    Deterministic for a fixed config and seed: rerunning produces identical
    latents, report values and plan, independent of MAKIMA_THREADS.
    """
    prep = prepare_inputs(config)
    profile = prep.profile
    masks = prep.masks
    counters = prep.counters
    z0 = prep.z0
    unet = prep.unet
    schedule = prep.schedule
    text_src, text_tgt, text_null = prep.text_src, prep.text_tgt, prep.text_null
    n = prep.frames.shape[0]
    h, w = z0.height, z0.width
    masks_at_res = prep.masks_at_res
    mod_config = ModulationConfig(
        gamma_self=config.gamma_self, gamma_cross=config.gamma_cross,
        enabled=config.modulation,
    )

    pool = _thread_pool()
    out_dir = Path(config.output_dir)
    if config.dump_attention:
        out_dir.mkdir(parents=True, exist_ok=True)

    policy = InjectionPolicy(
        qk_layers=frozenset(SELF_LAYER_IDS),
        feature_layer=CONV_LAYER_ID,
        qk_until=config.qk_injection_until if config.injection else 0,
        feature_until=config.feature_injection_until if config.injection else 0,
    )

    started = time.perf_counter()
    try:
        cache = AttentionCache()

        def invert_predictor(z, t, step_index):
            return unet.predict(
                z, StepContext(t=t, text=text_src, cache=cache, record=True, pool=pool)
            )

        z_terminal, cache = ddim_invert(z0, schedule, invert_predictor, cache)

        count = min(config.keyframes_per_step, n)
        features = z0.data.reshape(n, -1)
        ranking = diversity_ranking(features, count) if config.propagation else list(range(n))

        plan = KeyframePlan()
        alpha_self_range: list[tuple[int, float, float]] = []
        alpha_cross_range: list[tuple[int, float, float]] = []

        z = z_terminal.data
        ts = schedule.timestep_map
        for step_index in range(config.sample_steps):
            t = int(ts[step_index])
            t_prev = int(ts[step_index + 1]) if step_index + 1 < len(ts) else 0
            if config.propagation:
                keyframes = per_step_keyframe_rotation(ranking, step_index, count)
            else:
                keyframes = None
            inject_qk = frozenset(
                layer_id
                for layer_id in SELF_LAYER_IDS
                if apply_injection_policy(step_index, layer_id, policy)[0]
            )
            _, inject_feature = apply_injection_policy(step_index, CONV_LAYER_ID, policy)
            step_plan = StepPlan(
                step_index, keyframes if keyframes is not None else tuple(range(n))
            )
            diagnostics: dict = {}
            attn_sink: dict | None = {} if config.dump_attention else None

            def make_ctx(text, plan_rows, sink):
                return StepContext(
                    t=t,
                    text=text,
                    keyframes=keyframes,
                    cache=cache,
                    inject_qk_layers=inject_qk,
                    inject_feature=inject_feature,
                    modulate_self=config.modulation,
                    modulate_cross=config.modulation,
                    mod_config=mod_config,
                    masks=masks_at_res,
                    sigma_mode=config.sigma_mode,
                    counters=counters,
                    diagnostics=diagnostics,
                    plan_rows=plan_rows,
                    attn_sink=sink,
                    pool=pool,
                )

            eps_cond = unet.predict(z, make_ctx(text_tgt, step_plan.rows, attn_sink))
            if config.guidance == 1.0:
                eps = eps_cond
            else:
                eps_uncond = unet.predict(z, make_ctx(text_null, None, None))
                eps = cfg_combine(eps_uncond, eps_cond, config.guidance)
            z = ddim_sample_step(z, eps, t, t_prev, schedule)

            plan.steps.append(step_plan)
            if diagnostics.get("alpha_self"):
                values = diagnostics["alpha_self"]
                alpha_self_range.append((step_index, min(values), max(values)))
            if diagnostics.get("alpha_cross"):
                values = diagnostics["alpha_cross"]
                alpha_cross_range.append((step_index, min(values), max(values)))
            if attn_sink:
                _dump_attention_maps(out_dir, step_index, attn_sink)

        edited = LatentVideo(z)
        runtime = time.perf_counter() - started
    finally:
        if pool is not None:
            pool.shutdown()

    if embedder is None:
        embedder = ToyEmbedder(config.seed, profile.channels, profile.d_text)
    metrics = metric_suite(
        embedder.embed_frames(edited),
        embedder.embed_prompt(text_src),
        embedder.embed_prompt(text_tgt),
    )
    omegas = [
        float(np.mean([mask_area_ratio(masks_at_res[m, i], h * w) for i in range(n)]))
        for m in range(masks.attributes)
    ]
    report = EditReport(
        clip_t_like=metrics.clip_t_like,
        clip_f_like=metrics.clip_f_like,
        frame_acc_like=metrics.frame_acc_like,
        clip_f_degenerate=metrics.clip_f_degenerate,
        runtime_seconds=runtime,
        frames=n,
        sample_steps=config.sample_steps,
        seed=config.seed,
        guidance=config.guidance,
        counters=counters,
        omega_per_attribute=omegas,
        alpha_self_range=alpha_self_range,
        alpha_cross_range=alpha_cross_range,
    )
    return edited, report, plan


def emit_artifacts(
    edited: LatentVideo, report: EditReport, plan: KeyframePlan, config: EditConfig
) -> dict[str, str]:
    """Write latents, report and keyframe plan atomically; returns paths."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latent_path = out_dir / "edited_latents.mklt"
    tmp = latent_path.with_name(latent_path.name + ".tmp")
    save_latents(tmp, edited)
    os.replace(tmp, latent_path)
    report_path = out_dir / "report.txt"
    _atomic_write_text(report_path, "\n".join(report.lines()) + "\n")
    plan_path = out_dir / "keyframe_plan.txt"
    _atomic_write_text(plan_path, "\n".join(plan.lines()) + "\n")
    return {
        "latents": str(latent_path),
        "report": str(report_path),
        "plan": str(plan_path),
    }
