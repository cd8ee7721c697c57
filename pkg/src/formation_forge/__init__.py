"""Formation planning with adaptive surrogate weights and a displacement controller."""

__version__ = "0.1.0"
