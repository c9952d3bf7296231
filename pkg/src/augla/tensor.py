"""Dense array primitives shared by every attention path.

Arrays are plain ``numpy.ndarray`` objects. Float64 is the reference
scalar type; float32 is accepted for benchmarking only.
"""

import numpy as np

from .errors import DimensionError, NonFiniteError

Tensor = np.ndarray

# Most negative finite double. Used instead of -inf for masked logits so
# that max-subtraction never produces inf - inf.
NEG_FILL = float(np.finfo(np.float64).min)

DTYPES = {"f64": np.float64, "f32": np.float32}


def as_tensor(x, dtype=np.float64) -> Tensor:
    """Convert ``x`` to a contiguous floating array and reject non-finite values."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    check_finite(arr)
    return arr


def check_finite(a: Tensor, name: str = "tensor") -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains NaN or Inf")


def rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed accumulation order.

    The inner index is accumulated strictly left to right, one rank-1 update
    at a time, so the result is bitwise identical to the textbook triple
    loop and to any repeated call on the same inputs. No BLAS is involved.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for p in range(a.shape[1]):
        out += a[:, p, None] * b[None, p, :]
    return out


def row_softmax(a: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax along the last axis of ``scale * a`` with max-subtraction."""
    z = np.asarray(a) * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_fill(a: Tensor, mask: Tensor, fill: float) -> Tensor:
    """Keep ``a`` where ``mask`` is true, write ``fill`` elsewhere."""
    a = np.asarray(a)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != mask.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {a.shape}")
    return np.where(mask, a, fill_value(fill, a.dtype))


def fill_value(fill: float, dtype) -> np.generic:
    """``fill`` as a scalar of ``dtype``, clipped to its finite range."""
    if np.issubdtype(dtype, np.floating):
        info = np.finfo(dtype)
        fill = min(max(fill, float(info.min)), float(info.max))
    return np.asarray(fill, dtype=dtype)


def causal_mask(n: int) -> Tensor:
    """Boolean lower-triangular ``n x n`` mask (row attends to columns <= row)."""
    return np.tril(np.ones((n, n), dtype=bool))
