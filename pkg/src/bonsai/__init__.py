"""One-shot architecture search with differentiable memory-aware pruners."""

__version__ = "0.1.0"
