"""Mask-pooled grounding fine-tuning for small contrastive vision-language encoders."""

__version__ = "0.1.0"
