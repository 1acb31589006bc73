"""Static action recognition from convolutional features.

A from-scratch numpy implementation of a 23-layer ImageNet-style network used
as a feature extractor (taps at its fully connected layers), classical
classifiers over the tapped features, head-only fine-tuning with a layer-size
sweep, and frame/video level evaluation.
"""

from .errors import ActionFeatError

__version__ = "0.1.0"

__all__ = ["ActionFeatError", "__version__"]
