"""Chunk-parallel video diffusion with a fixed-size global token interface.

A numpy-only toy implementation: a small tape autodiff (:mod:`numcore`),
space-time patching (:mod:`patchio`), the chunk denoiser (:mod:`dit`), the
global-token encoder (:mod:`vin`), training and samplers (:mod:`diffusion`),
optical-flow metrics (:mod:`metrics`) and an analytic FLOP model
(:mod:`profiler`).
"""

__version__ = "0.1.0"
