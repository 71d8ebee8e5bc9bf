"""Superdiffusion laboratory: environment sampling, tracer dynamics, variational bounds, scaling checks."""

__version__ = "0.3.0"
