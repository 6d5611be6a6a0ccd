"""8-bit ViT inference with image-adaptive token pruning, plus cost models and a planner."""

__version__ = "0.1.0"
