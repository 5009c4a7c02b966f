"""Document image dewarping with a gated, bifurcated stacked U-Net."""

__version__ = "0.1.0"
