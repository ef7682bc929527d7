"""Multimodal speech emotion recognition over speech, text and motion capture."""

__version__ = "0.1.0"

from .labels import EmotionLabel  # noqa: E402

__all__ = ["EmotionLabel", "__version__"]
