"""Desk-scale optimized preference inference: summary-augmented preference
objectives, group-relative training of an inference policy, two-stage
optimization, plug-and-play transfer, and exact information bounds."""

__version__ = "0.1.0"
