"""Numerical laboratory for convergence rates of softmax-gated mixtures of experts."""
