"""Minimal reverse-mode automatic differentiation over dense float64 matrices."""
from .linalg import eigenvalues, hessenberg, inverse, spectral_radius, spectral_radius_value
from .tensor import (
    GradientTape,
    Parameter,
    Tensor,
    absolute,
    add,
    apply_mask,
    as_tensor,
    backward,
    hadamard,
    hstack,
    matmul,
    mean,
    neg,
    reciprocal,
    record,
    record_binary,
    record_unary,
    scalar_mul,
    scale,
    sigmoid,
    sub,
    total,
    transpose,
)

__all__ = [
    "GradientTape", "Parameter", "Tensor", "absolute", "add", "apply_mask", "as_tensor", "backward",
    "eigenvalues", "hadamard", "hessenberg", "hstack", "inverse", "matmul", "mean", "neg",
    "reciprocal", "record", "record_binary", "record_unary", "scalar_mul", "scale", "sigmoid",
    "spectral_radius", "spectral_radius_value", "sub", "total", "transpose",
]
