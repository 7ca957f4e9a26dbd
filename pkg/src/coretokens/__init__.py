"""Token-level data summaries for replay in sequential training of vision transformers."""

__version__ = "0.1.0"
