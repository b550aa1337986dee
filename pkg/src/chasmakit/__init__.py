"""Toolkit for crossmodal-misalignment training data, modality-balanced
benchmarks, a compact Transformer detector, and unimodal-bias audits."""

__version__ = "0.1.0"
