"""Robust compressive architecture search: RL-driven network-to-network compression
under adversarial training, with a sparse-coding theory sandbox."""

__version__ = "0.1.0"
