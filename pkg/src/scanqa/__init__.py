"""Question answering over colored 3D point-cloud scenes."""

__version__ = "0.1.0"
