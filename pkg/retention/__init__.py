"""
Retention-constrained model development.

This package holds the desk-scale two-tower model, the losses and retention
constraints, the moving-average estimators and penalty solver, the weighting
baselines, the developmental-safety metrics and the synthetic scenarios.
"""
