"""Exact, enumerable laboratory for language-model domain adaptation and data selection."""

__version__ = "0.1.0"
