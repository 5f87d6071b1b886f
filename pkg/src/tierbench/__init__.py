"""Harness for evaluating CLI coding agents across ablation tiers T0-T6."""

from __future__ import annotations

__version__ = "0.1.0"
