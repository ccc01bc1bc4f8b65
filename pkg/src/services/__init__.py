"""Data generation, anchoring, style bank, federation, evaluation and experiment services."""
