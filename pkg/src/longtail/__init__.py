"""Balanced classifier training for long-tailed data.

The package provides:

- a synthetic long-tailed classification testbed (``datagen``),
- a small two-part model (feature extractor + linear head) with hand-derived
  gradients and SGD (``classifier``),
- baseline and balance-aware losses with analytic gradients (``losses``),
- streaming per-class indicator statistics (``indicators``),
- feature hallucination: box-driven feature distribution tracking and
  tail-biased feature synthesis (``fhm``),
- the two-stage decoupled training pipeline (``trainer``),
- balance diagnostics and run comparison (``metrics``),
- a command-line interface (``cli``).

Label convention everywhere: foreground categories are integers 1..C and the
background/objectness channel is C+1.  Logit vectors have length C+1 with the
background channel stored last (0-based index C).
"""

from .core import Box, HyperParams, RngStreams, validate_params

__all__ = ["Box", "HyperParams", "RngStreams", "validate_params"]
__version__ = "0.1.0"
