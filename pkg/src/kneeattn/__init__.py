"""kneeattn: a miniature float64 deep-learning engine with trainable spatial
attention, used to grade synthetic joint-gap images on a five-point ordinal
scale and to verify that the attention masks localize the informative region
without supervision.
"""

__version__ = "0.1.0"

from .graph import Node, Parameter, ShapeError
from .kernels import BACKEND as kernel_backend

__all__ = ["Node", "Parameter", "ShapeError", "kernel_backend", "__version__"]
