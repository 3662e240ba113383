"""
tensor_core.py

Dense float64 tensors and the kernels the STGT layers are built from.

Tensors are plain numpy arrays (row-major, float64, batch-leading axis
convention: batch x nodes x features). The functions here add the checks the
layers rely on: shape agreement, finite values and binary masks.

Layer contract:
  - forward(x) -> (out, cache)
  - backward(dout, cache) -> LayerGrads
Gradients are written by hand per layer; numerical_gradient() is the central
finite-difference oracle the tests compare them against.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Protocol, Tuple

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class MaskError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


@dataclass
class LayerGrads:
    """Parameter gradients (keyed like the layer's params) and the input gradient."""
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    input: Optional[np.ndarray] = None


class Layer(Protocol):
    params: Dict[str, np.ndarray]

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, object]:
        ...

    def backward(self, dout: np.ndarray, cache: object) -> LayerGrads:
        ...


def as_tensor(values, name: str = "tensor") -> np.ndarray:
    """Convert to a float64 array; every dimension must be >= 1 and every entry finite."""
    arr = np.asarray(values, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(dim < 1 for dim in arr.shape):
        raise DimensionError(f"{name} has an empty dimension: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def linear(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """x W (+ b) over the last axis of x; leading axes are flattened for the product."""
    x = np.asarray(x, dtype=DTYPE)
    out = matmul(x.reshape(-1, x.shape[-1]), w)
    if b is not None:
        out = elementwise("add", out, b)
    return out.reshape(*x.shape[:-1], out.shape[-1])


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "relu": relu,
    "elu": elu,
}

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Pointwise kernel. Binary ops accept b of the same shape as a, or b shaped
    like a without its leading axis (a row vector broadcast down the batch).
    """
    a = np.asarray(a, dtype=DTYPE)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes a single operand")
        return _UNARY[op](a)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op '{op}'")
    if b is None:
        raise ValueError(f"{op} needs two operands")
    b = np.asarray(b, dtype=DTYPE)
    if b.shape != a.shape and b.shape != a.shape[1:]:
        raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape}")
    return _BINARY[op](a, b)


def check_mask(mask: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != tuple(shape):
        raise DimensionError(f"mask shape {mask.shape} does not match weight shape {tuple(shape)}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise MaskError("mask entries must be 0 or 1")
    return mask


def masked_apply(w: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Hadamard product with a binary mask; masked-out positions become +0.0."""
    w = np.asarray(w, dtype=DTYPE)
    m = check_mask(m, w.shape)
    return np.where(m == 1.0, w, 0.0)


def nonzero_count(m: np.ndarray) -> int:
    return int(np.count_nonzero(m))


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """
    Central differences of the scalar f() with respect to x, perturbing x in
    place and restoring every entry afterwards.
    """
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=[["readwrite"]])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        f_plus = f()
        x[idx] = orig - eps
        f_minus = f()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
        it.iternext()
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """||a - n|| / max(||a|| + ||n||, floor), taken over the whole tensor."""
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    denom = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / denom
