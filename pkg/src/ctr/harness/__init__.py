"""Synthetic scenes, a surrogate first stage, training, evaluation and ablations."""
