"""Patch classifier training, convolutional unit dissection, and the expert
survey service for labeling what individual units detect."""

__version__ = "0.1.0"

from .tensor import ConvSpec, Tensor  # noqa: F401
from .model import Model, forward, load_model, save_model  # noqa: F401
