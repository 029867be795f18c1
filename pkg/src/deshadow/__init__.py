"""Shadow removal through adversarial residual and inverse-illumination
estimation, evaluated with region-masked CIELAB metrics."""

__version__ = "0.1.0"
