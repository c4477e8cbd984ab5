"""Context-aware sequential multi-behavior recommender.

Self-contained: a tape-based reverse-mode core over NumPy with optional
compiled attention kernels, SASRec-style sequence training with per-behavior
loss weights, and a leave-one-out ranking harness.
"""

__version__ = "0.1.0"
