"""Balanced score distillation on analytic diffusion oracles."""
