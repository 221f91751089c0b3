"""Text-image-to-video diffusion on synthetic Moving-MNIST variants."""

__version__ = "0.1.0"

FORMAT_VERSION = 1
