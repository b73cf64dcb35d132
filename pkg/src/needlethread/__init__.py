"""Simulated tactile needle threading: thread dynamics, tactile imprints,
tail-end finding and learned eyelet insertion."""

__version__ = "0.1.0"
