"""Active transition-query reinforcement learning with GP dynamics models."""

__version__ = "0.1.0"
