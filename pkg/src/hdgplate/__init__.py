"""Locking-free hybridizable DG solver for Reissner-Mindlin plate bending."""

__version__ = "0.1.0"
