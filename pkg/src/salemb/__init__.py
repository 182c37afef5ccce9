"""Saliency-guided multimodal embedding trainer, desk-scale and fully deterministic.

The package trains a small multimodal transformer with a contrastive
retrieval objective, optionally augmented by two saliency mechanisms:
attention alignment against subject masks and saliency-driven feature
regeneration. A synthetic shape/color corpus with exact ground-truth
masks makes every stage independently verifiable.
"""

__version__ = "0.1.0"
