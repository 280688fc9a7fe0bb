"""Parallel vertex diffusion for referring grounding on synthetic scenes."""
