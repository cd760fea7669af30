"""Two-stage, ranking-trained video quality assessment (full- and no-reference)."""

__version__ = "0.1.0"
