"""Remaining-useful-life regression on image streams via penalized low-rank tensor models."""

__version__ = "0.1.0"
