"""Dense vector primitives, distances, and finite-difference gradient checking.

All arithmetic is float64; vectors are 1-D numpy arrays.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Floor for the relative-error denominator, avoids 0/0 in flat regions.
REL_ERR_FLOOR = 1e-8


def as_vector(v) -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting empty or non-finite input."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains non-finite entries")
    return arr


def l2_distance(a, b) -> float:
    """Euclidean distance sqrt(sum((a_i - b_i)^2))."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.linalg.norm(a - b))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, in [-1, 1]."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def l2_normalize(v) -> np.ndarray:
    """Scale v to unit L2 norm, preserving direction."""
    v = as_vector(v)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass
class GradCheckReport:
    """Outcome of a central finite-difference gradient comparison."""

    max_relative_error: float
    per_parameter_errors: np.ndarray

    def ok(self, tol: float) -> bool:
        return self.max_relative_error < tol


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-6,
) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    Per coordinate i the check evaluates loss_fn at params +/- eps*e_i and
    reports |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|).
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    params = np.asarray(params, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if params.shape != analytic_grad.shape:
        raise ValueError("params and analytic_grad shapes differ")

    flat = params.ravel()
    grad = analytic_grad.ravel()
    errors = np.empty(flat.size, dtype=np.float64)
    work = flat.copy()
    for i in range(flat.size):
        orig = work[i]
        work[i] = orig + eps
        hi = float(loss_fn(work.reshape(params.shape)))
        work[i] = orig - eps
        lo = float(loss_fn(work.reshape(params.shape)))
        work[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"loss is non-finite near parameter {i}")
        g_fd = (hi - lo) / (2.0 * eps)
        denom = max(REL_ERR_FLOOR, abs(g_fd) + abs(grad[i]))
        errors[i] = abs(g_fd - grad[i]) / denom
    return GradCheckReport(float(errors.max()), errors)


def finite_diff_check_multi(
    loss_fn: Callable[[list], float],
    params: list,
    analytic_grads: list,
    eps: float = 1e-6,
) -> GradCheckReport:
    """finite_diff_check over a list of parameter arrays of mixed shapes.

    loss_fn receives the list with each array restored to its original shape.
    """
    arrays = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in analytic_grads]
    if len(arrays) != len(grads):
        raise ValueError("params and analytic_grads lengths differ")
    for p, g in zip(arrays, grads):
        if p.shape != g.shape:
            raise ValueError("params and analytic_grads shapes differ")
    shapes = [p.shape for p in arrays]
    sizes = [p.size for p in arrays]
    offsets = np.cumsum([0] + sizes)

    def unpack(flat):
        return [
            flat[offsets[i]:offsets[i + 1]].reshape(shapes[i])
            for i in range(len(shapes))
        ]

    packed = np.concatenate([p.ravel() for p in arrays])
    packed_grad = np.concatenate([g.ravel() for g in grads])
    return finite_diff_check(lambda flat: loss_fn(unpack(flat)), packed, packed_grad, eps)
