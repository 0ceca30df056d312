"""Scene-graph-guided 3D vision-language pre-training on synthetic scenes."""

__version__ = "0.1.0"
