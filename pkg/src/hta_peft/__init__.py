"""Householder-transformation adapters for parameter-efficient fine-tuning of a small ViT."""

__version__ = "0.1.0"
