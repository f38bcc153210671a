"""Experiment recipes, configuration and report emission for shellflow."""

__version__ = '0.1.0'
