"""Positive-unlabeled offline RL on synthetic multi-domain puck environments."""

__version__ = "0.1.0"
