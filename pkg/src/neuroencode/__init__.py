"""Voxelwise encoding models with LoRA fine-tuning of a small audio transformer."""

__version__ = "0.1.0"
