"""Desk-scale toolkit for training strictly monotonic neural transducers.

Implements a 3-stage recipe (frame-wise cross-entropy on fixed alignments,
full-sum fine-tuning, static N-best minimum-risk training for LM
integration) with exact hand-written gradients, a one-cycle learning rate
policy, an n-gram language model, and a shallow-fusion beam decoder.
"""

__version__ = "0.1.0"
