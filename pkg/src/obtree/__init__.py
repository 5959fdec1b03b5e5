"""Oblivious decision-tree training and inference over replicated secret shares."""

__version__ = "0.1.0"
