"""Desk-scale speech spoofing pipeline: enhancement, voice conversion,
neural vocoding, and anti-spoofing evaluation."""

from .dsp import CqccConfig, FeatureMatrix, MelConfig, Waveform

__all__ = ["Waveform", "FeatureMatrix", "MelConfig", "CqccConfig"]
__version__ = "0.1.0"
