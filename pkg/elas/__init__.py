"""
ELAS - efficient pre-training of low-rank transformers with 2:4 activation sparsity.

Desk-scale toolkit: low-rank factored layers, 2:4 activation sparsification with
a straight-through backward rule, an Adam/SVD-refresh optimizer loop, a
dense-warmup trainer, and an analytical activation-memory model.
"""

__version__ = "0.1.0"
