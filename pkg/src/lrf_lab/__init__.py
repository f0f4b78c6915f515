"""Slate ranking lab: cascade click model, lift-based ranking, simulator and training loops."""

from __future__ import annotations

__version__ = "0.1.0"
