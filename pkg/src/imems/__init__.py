"""Image-embedded segmentation: codec, networks, training and evaluation."""
from .embedding import decode, encode, recover_grayscale, to_grayscale

__version__ = "0.1.0"

__all__ = ["encode", "decode", "recover_grayscale", "to_grayscale", "__version__"]
