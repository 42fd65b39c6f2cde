"""Reward over-optimization on a synthetic token world, and its mitigation with a
shared-encoder multi-head reward model aggregated by minimum."""

__version__ = "0.1.0"
