"""Desk-scale unified multi-task model for blood-smear microscopy."""

__version__ = "0.1.0"
