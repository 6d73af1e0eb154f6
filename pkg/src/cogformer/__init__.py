"""Desk-scale deterministic GPT decoder with cognitive side-paths.

A small fp32 transformer plus five optional augmentations (bilinear
attention scorer, simplicial geometry block, tiered external memory,
precision-weighted cross-layer prediction, probe-based self model), a
phase-chained training orchestrator, and an ablation/decomposition harness.
"""

__version__ = "0.1.0"
