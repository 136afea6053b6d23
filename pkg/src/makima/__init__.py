"""Tuning-free multi-attribute video editing machinery on a toy diffusion backbone.

The package implements deterministic DDIM inversion with attention caching,
inflated spatial-temporal self-attention with source injection, mask-guided
attention modulation, and keyframe-based feature propagation, all on a
seeded toy denoiser so every pipeline stage is exactly testable at desk
scale.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
