"""Prompt-controlled diffusion cloud removal, small enough to train on a CPU."""

__version__ = "0.1.0"
