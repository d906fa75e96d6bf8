"""Desk-scale toolkit for studying adversarially robust generalization of CNN, ViT and hybrid classifiers."""

__version__ = "0.1.0"
