"""Mask-quality tooling for long-tailed instance segmentation.

Ratio-aware FPN level assignment, a balanced Dice + weighted-BCE mask loss
with verified gradients, repeat-factor sampling and pseudo-label filtering,
a multi-scale test-time merge, and a synthetic benchmark with mask AP.
"""

__version__ = "0.1.0"
