"""Decentralized communicating agents with contrastive message grounding."""

__version__ = "0.1.0"
