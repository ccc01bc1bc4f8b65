"""Mock experiment configs, samples, encoders and heads."""
