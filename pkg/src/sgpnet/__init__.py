"""Spectral band prototypes and heat-diffusion geodesic matching for few-shot segmentation."""

__version__ = "0.1.0"
