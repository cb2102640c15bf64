"""Dual-encoder CTC code-switching ASR with language-specific characteristic assistance."""

__version__ = "0.1.0"
