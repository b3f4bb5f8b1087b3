"""Desk-scale holistic audio generation: flow matching over a tri-attention DiT."""

__version__ = "0.1.0"
