"""Fairness-aware recommender training via bounded cross-group data augmentation."""

__version__ = "0.1.0"
