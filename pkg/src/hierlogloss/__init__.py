"""Multiclass soft classifiers built from binary ones, evaluated under log-loss."""

__version__ = "0.1.0"
