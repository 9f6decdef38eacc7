"""Diffusion prior over 3D human poses with geometry-guided sampling."""

from . import (
    dataio,
    denoiser,
    errors,
    geometry,
    metrics,
    numeric,
    observation,
    sampler,
    schedule,
)

__version__ = "0.1.0"

__all__ = [
    "dataio",
    "denoiser",
    "errors",
    "geometry",
    "metrics",
    "numeric",
    "observation",
    "sampler",
    "schedule",
    "__version__",
]
