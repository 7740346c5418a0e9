"""Prototype-similarity student networks with relevance heatmaps and
outlier scoring, distilled from a small CNN teacher."""

__version__ = "0.1.0"
