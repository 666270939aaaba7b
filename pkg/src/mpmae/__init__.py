"""Multi-pretext masked autoencoder for aligned geospatial modalities."""

__version__ = "0.1.0"
