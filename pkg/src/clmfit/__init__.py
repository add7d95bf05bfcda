"""Landmark fitting with convolutional patch experts.

A shape-model fitter in three parts: a 3-D point distribution model
(:mod:`clmfit.pdm`), convolutional-experts local detectors
(:mod:`clmfit.cen`), and a regularized mean-shift optimizer
(:mod:`clmfit.nurlms`), plus a toy trainer, a synthetic-scene harness,
evaluation metrics, model I/O, and a CLI.
"""

__version__ = "0.1.0"
