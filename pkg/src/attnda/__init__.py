"""Attention-regularised unsupervised domain adaptation for character recognisers."""

__version__ = "0.1.0"
