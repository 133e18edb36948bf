"""Probabilistic sequence classifiers with comprehensive uncertainty
estimation: sparse GP heads (whitened and grid-interpolated), mean-field
Bayesian layers, and their combination, evaluated end to end on
synthetic EHR-like cohorts."""

__version__ = "0.1.0"
