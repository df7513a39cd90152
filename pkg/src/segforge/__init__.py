"""Box-promptable medical image segmentation on CPU: preprocessing, a
distillable SAM-style network, cached inference, and challenge-style
evaluation and ranking."""

__version__ = "0.1.0"
