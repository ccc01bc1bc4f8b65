"""Config loading, validation, numerics and artifact persistence."""
