"""holoslide: end-to-end whole-slide segmentation at desk scale."""

__version__ = "0.1.0"
