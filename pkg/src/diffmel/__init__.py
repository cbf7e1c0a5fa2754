"""Few-step adversarial diffusion acoustic model for multi-speaker TTS."""

__version__ = "0.1.0"
