"""Label-free cross-lingual model transfer via two-step knowledge distillation,
evaluated end to end on a synthetic multilingual intent/slot benchmark."""

__version__ = "0.1.0"
