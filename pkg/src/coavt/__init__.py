"""Desk-scale tri-modal (audio/visual/text) alignment pre-training on a
self-contained float64 reverse-mode engine."""

__version__ = "0.1.0"

from . import diffcore, dataio, encoders, objectives, trainer, evaluation  # noqa: F401
