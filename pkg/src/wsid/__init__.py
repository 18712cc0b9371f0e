"""Weakly supervised salient instance detection at toy scale."""

__version__ = "0.1.0"
