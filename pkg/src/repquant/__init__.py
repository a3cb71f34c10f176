"""Post-training quantization for structurally re-parameterized CNNs."""

__version__ = "0.1.0"
