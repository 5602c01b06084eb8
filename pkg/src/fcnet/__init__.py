"""Functional-connectivity classification with DSDC feature selection and a pretrained MLP."""

__version__ = "0.1.0"
