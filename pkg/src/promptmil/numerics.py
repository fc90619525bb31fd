"""Dense kernels, probability transforms, losses, and a finite-difference gradient checker.

All functions operate on 64-bit numpy arrays and are pure: no hidden state,
safe to call concurrently.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolationError, DegenerateInputError

CE_EPS = 1e-12  # floor for predicted probabilities inside the log


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, row-major float64 2-D array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolationError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ContractViolationError(f"{name} has non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 1:
        raise ContractViolationError(f"{name} must be 1-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ContractViolationError(f"{name} has non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with explicit dimension checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolationError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    return a @ b


def softmax_columns(m) -> np.ndarray:
    """Column-wise softmax with per-column max subtraction.

    Every output column sums to 1 and all entries lie in (0, 1).
    """
    m = as_matrix(m, "m")
    z = m - m.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def l2_normalize_rows(m, name: str = "matrix") -> np.ndarray:
    """Scale every row to unit L2 norm; zero rows are rejected."""
    m = as_matrix(m, name)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{name} has a zero-norm row")
    return m / norms


def cosine(a, b) -> float:
    """Cosine similarity between two nonzero vectors."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ContractViolationError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def class_probabilities(sims, tau: float) -> np.ndarray:
    """Temperature softmax over per-class similarities."""
    sims = as_vector(sims, "sims")
    if not tau > 0:
        raise ContractViolationError(f"tau must be positive, got {tau}")
    z = sims / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def cross_entropy(p, y: int) -> float:
    """Negative log probability of the true class, floored at CE_EPS."""
    p = as_vector(p, "p")
    if not 0 <= y < p.shape[0]:
        raise ContractViolationError(f"class index {y} out of range for K={p.shape[0]}")
    return float(-np.log(max(p[y], CE_EPS)))


def grad_check(
    f: Callable[[np.ndarray], tuple[float, Sequence[float]]],
    x0,
    eps: float,
) -> float:
    """Compare an analytic gradient against central differences.

    ``f(x)`` must return ``(value, gradient)``; only the value part is used
    for the finite differences, the gradient part is checked at ``x0``.
    Returns the max over coordinates of
    ``|analytic - central| / max(1, |central|)``.
    """
    if not 1e-7 < eps < 1e-3:
        raise ContractViolationError(f"eps must lie in (1e-7, 1e-3), got {eps}")
    x0 = as_vector(x0, "x0")
    value, grad = f(x0)
    grad = as_vector(np.asarray(grad, dtype=np.float64).ravel(), "analytic gradient")
    if not np.isfinite(value):
        raise DegenerateInputError("objective is non-finite at x0")
    if grad.shape != x0.shape:
        raise ContractViolationError(
            f"gradient shape {grad.shape} does not match x0 shape {x0.shape}"
        )

    worst = 0.0
    for i in range(x0.shape[0]):
        xp = x0.copy()
        xp[i] += eps
        xm = x0.copy()
        xm[i] -= eps
        fp = f(xp)[0]
        fm = f(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DegenerateInputError(f"objective is non-finite near x0 (coord {i})")
        central = (fp - fm) / (2.0 * eps)
        rel = abs(grad[i] - central) / max(1.0, abs(central))
        worst = max(worst, rel)
    return worst
