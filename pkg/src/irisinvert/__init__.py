"""Iris template pipelines, template-to-image inversion networks and attack evaluation."""

__version__ = "0.1.0"
