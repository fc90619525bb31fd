"""Few-shot weakly supervised bag classification with two-level prompt learning.

Frozen toy encoders map prompt text to prototype and class-weight vectors;
prompt-guided pooling aggregates instance features into bag features; only
the learnable prompt tokens are trained, from a handful of labeled bags.
"""

__version__ = "0.1.0"
