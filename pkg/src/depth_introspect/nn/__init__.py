from .layers import (
    KINDS,
    GradcheckReport,
    Layer,
    LayerSpec,
    backward,
    build_layer,
    forward,
    gradcheck,
)
from .tensor import (
    AutodiffError,
    NonFiniteError,
    ShapeError,
    Tensor,
    default_dtype,
    no_grad,
    precision,
)

__all__ = [
    "KINDS",
    "AutodiffError",
    "GradcheckReport",
    "Layer",
    "LayerSpec",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "backward",
    "build_layer",
    "default_dtype",
    "forward",
    "gradcheck",
    "no_grad",
    "precision",
]
