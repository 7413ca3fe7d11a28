"""Offline actor-critic learning with discriminator-gated Bellman backups."""

__version__ = "0.1.0"
