"""Sample, experiment config, encoder and local objective models."""
