"""Desk-scale celiac-disease severity pipeline: tiling, filtering, stain
normalization, a residual patch classifier, slide aggregation and Grad-CAM."""

__version__ = "0.1.0"
