"""Shared builders for synthetic edit jobs (frames, masks, manifest, config).

``write_fixture`` materializes one edit job on disk. Each fixture carries
two configs: the edit job itself and a reconstruction variant (target
prompt equals the source prompt, modulation off, guidance 1, full
injection windows) used by structure-preservation checks.

``build_probe_embedder`` constructs the metric embedder for directional
ablation fixtures: it measures, at the first sampling steps, the exact
direction cross-attention modulation pushes the pooled latents (the
denoiser is z-independent under full injection, so per-step noise deltas
transport linearly into the output), then places the target prompt vector
along that direction and the source prompt vector opposite it. This is the
constructed correlation between target-attribute text and in-mask content
that the directional acceptance checks rely on.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from makima.attention import SELF_LAYER_IDS, StepContext
from makima.images import write_pgm, write_ppm
from makima.latents import AttentionCache, ddim_invert
from makima.modulation import ModulationConfig
from makima.numerics import philox_generator

SOURCE_PROMPT = "the stone tower beside the dark lake"
TARGET_PROMPT = "the glass tower beside the lava lake"
EDITS = [
    {"source": "stone tower", "target": "glass tower"},
    {"source": "dark lake", "target": "lava lake"},
]
RECON_EDITS = [
    {"source": "stone tower", "target": "stone tower"},
    {"source": "dark lake", "target": "dark lake"},
]

# attribute regions aligned to the 8px patch grid of a 32px frame
REGIONS = {0: (slice(0, 16), slice(0, 16)), 1: (slice(16, 32), slice(16, 32))}


@dataclass
class Fixture:
    root: Path
    config: Path
    recon_config: Path


def synth_frames(seed: int, n_frames: int = 4, size: int = 32) -> np.ndarray:
    """Deterministic frames: drifting gradient plus per-attribute color blocks."""
    gen = philox_generator(seed, "fixture-frames")
    colors = gen.uniform(60, 220, size=(len(REGIONS), 3))
    yy, xx = np.mgrid[0:size, 0:size]
    frames = np.empty((n_frames, size, size, 3), dtype=np.uint8)
    for i in range(n_frames):
        base = 40 + 60 * np.sin((xx + 3 * i) / size * np.pi) + 40 * (yy / size)
        frame = np.stack([base, base * 0.8 + 15, base * 0.6 + 30], axis=-1)
        for m, region in REGIONS.items():
            jitter = 8.0 * np.sin(0.7 * i + m)
            frame[region] = colors[m] + jitter
        frames[i] = np.clip(frame, 0, 255).astype(np.uint8)
    return frames


def region_masks(n_frames: int = 4, size: int = 32) -> np.ndarray:
    masks = np.zeros((len(REGIONS), n_frames, size, size), dtype=np.uint8)
    for m, region in REGIONS.items():
        masks[m, :, region[0], region[1]] = 1
    return masks


def _write_manifest(path: Path, edits) -> None:
    lines = ["frames: frames"]
    for m, edit in enumerate(edits):
        lines.append(f'attribute {m} "{edit["target"]}": masks/attr{m}_frame{{i}}.pgm')
    path.write_text("\n".join(lines) + "\n")


def write_fixture(
    root: Path,
    seed: int = 0,
    n_frames: int = 4,
    size: int = 32,
    sample_steps: int = 8,
    **overrides,
) -> Fixture:
    """Materialize a full edit job under ``root``."""
    root = Path(root)
    frames_dir = root / "frames"
    masks_dir = root / "masks"
    frames_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    frames = synth_frames(seed, n_frames, size)
    for i, frame in enumerate(frames):
        write_ppm(frames_dir / f"frame{i:03d}.ppm", frame)
    masks = region_masks(n_frames, size)
    for m in range(masks.shape[0]):
        for i in range(n_frames):
            write_pgm(masks_dir / f"attr{m}_frame{i}.pgm", masks[m, i])
    _write_manifest(root / "manifest.txt", EDITS)
    _write_manifest(root / "manifest_recon.txt", RECON_EDITS)
    config = {
        "manifest": "manifest.txt",
        "source_prompt": SOURCE_PROMPT,
        "target_prompt": TARGET_PROMPT,
        "edits": EDITS,
        "sample_steps": sample_steps,
        "guidance": 3.0,
        "qk_injection_until": max(1, sample_steps // 2),
        "feature_injection_until": max(1, (4 * sample_steps) // 5),
        "keyframes_per_step": 3,
        "seed": seed,
        "output_dir": "out",
    }
    config.update(overrides)
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2) + "\n")
    recon = dict(config)
    recon.update(
        manifest="manifest_recon.txt",
        target_prompt=SOURCE_PROMPT,
        edits=RECON_EDITS,
        guidance=1.0,
        modulation=False,
        qk_injection_until=sample_steps,
        feature_injection_until=sample_steps,
        output_dir="out_recon",
    )
    recon_path = root / "config_recon.json"
    recon_path.write_text(json.dumps(recon, indent=2) + "\n")
    return Fixture(root=root, config=config_path, recon_config=recon_path)


def pooled(z: np.ndarray) -> np.ndarray:
    """[N, C, h, w] -> per-frame channel means [N, C]."""
    return z.mean(axis=(2, 3), dtype=np.float64)


class DirectionalEmbedder:
    """Pooled-latent embedder with externally supplied prompt vectors."""

    def __init__(self, prompt_vectors: dict):
        self._prompts = {
            key: np.asarray(vec, dtype=np.float64) for key, vec in prompt_vectors.items()
        }

    def embed_frames(self, video) -> np.ndarray:
        return pooled(video.data)

    def embed_prompt(self, text) -> np.ndarray:
        return self._prompts[text.tokens]


def build_probe_embedder(prep, n_probe_steps: int = 2, kappa: float = 2.0):
    """Metric embedder aligned with the measured cross-modulation response."""
    config = prep.config
    cache = AttentionCache()

    def invert_predictor(z, t, step_index):
        return prep.unet.predict(
            z, StepContext(t=t, text=prep.text_src, cache=cache, record=True)
        )

    z_terminal, cache = ddim_invert(prep.z0, prep.schedule, invert_predictor, cache)
    schedule = prep.schedule
    ts = schedule.timestep_map
    ab = schedule.alpha_bar
    inject = frozenset(SELF_LAYER_IDS)
    mod_config = ModulationConfig(gamma_self=0.0, gamma_cross=config.gamma_cross)
    dv = np.zeros(prep.z0.channels)
    z = z_terminal.data
    for k in range(min(n_probe_steps, len(ts))):
        t = int(ts[k])
        t_prev = int(ts[k + 1]) if k + 1 < len(ts) else 0
        c = np.sqrt(ab[t_prev] / ab[t])
        d = np.sqrt(1 - ab[t_prev]) - c * np.sqrt(1 - ab[t])
        # a step-k noise delta lands in z0 scaled by the remaining rescales
        transport = np.sqrt(ab[0] / ab[t_prev]) * d
        base = StepContext(
            t=t, text=prep.text_tgt, cache=cache,
            inject_qk_layers=inject, inject_feature=True,
        )
        modulated = StepContext(
            t=t, text=prep.text_tgt, cache=cache,
            inject_qk_layers=inject, inject_feature=True,
            modulate_cross=True, mod_config=mod_config, masks=prep.masks_at_res,
        )
        eps_plain = prep.unet.predict(z, base)
        eps_mod = prep.unet.predict(z, modulated)
        dv += transport * pooled(eps_mod - eps_plain).mean(axis=0)
    dv /= np.linalg.norm(dv)
    anchor = pooled(prep.z0.data).mean(axis=0)
    anchor /= np.linalg.norm(anchor)
    target = anchor + kappa * dv
    target /= np.linalg.norm(target)
    source = anchor - kappa * dv
    source /= np.linalg.norm(source)
    return DirectionalEmbedder(
        {prep.text_tgt.tokens: target, prep.text_src.tokens: source}
    )
