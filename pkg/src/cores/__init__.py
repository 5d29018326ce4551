"""Conformal-reward graph sparsification."""
