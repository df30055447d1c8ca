"""Surprisal of audio under small denoising diffusion models, and the
statistics used to relate it to listener liking ratings."""

__version__ = "0.1.0"
