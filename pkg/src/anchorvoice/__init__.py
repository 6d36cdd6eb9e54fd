"""Teacher-student speaker encoders with curriculum cropping for zero-shot TTS at desk scale."""

__version__ = "0.1.0"
