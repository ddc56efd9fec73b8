"""Lesion-patch contrastive pretraining and ordinal-grade evaluation in numpy."""

__version__ = "0.1.0"
