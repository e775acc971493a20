"""Semi-supervised classification of fuzzy labels with overclustering heads."""

__version__ = "0.1.0"
