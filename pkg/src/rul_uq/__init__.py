"""Uncertainty quantification for remaining-useful-life regression.

A small reverse-mode autodiff engine drives heteroscedastic networks,
Monte Carlo dropout, deep ensembles and four mean-field variational
samplers, evaluated on a seeded synthetic run-to-failure fleet.
"""

__version__ = "0.1.0"
