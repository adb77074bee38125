"""Utilities package for earlyfuse.

This package provides validation helpers for configuration tables and
execution tracking for grid runs.
"""

from .evaluation import GridEvaluator
from .validation import flatten_keys, reject_unknown_keys

__all__ = ['GridEvaluator', 'flatten_keys', 'reject_unknown_keys']
