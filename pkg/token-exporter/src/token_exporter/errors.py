"""Error types raised by the exporter."""


class ModelLoadError(Exception):
    """The requested model could not be constructed or its weights loaded."""


class ImageDecodeError(Exception):
    """An input image could not be read or decoded."""
