"""Prior kernel families with closed-form derivatives.

Two families are supported: the RBF kernel

    K(p, q) = variance * exp(-||p - q||^2 / (2 * length_scale^2))

and the linear kernel K(p, q) = p^T q.  Gradients and cross-derivative
matrices are implemented in closed form; finite differences are used only
as test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

RBF = "rbf"
LINEAR = "linear"


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters.

    ``variance`` and ``length_scale`` are only meaningful for the RBF
    family and must be positive there; the linear kernel has no
    hyperparameters.
    """

    family: str = RBF
    variance: float = 1.0
    length_scale: float = 1.0

    def __post_init__(self):
        if self.family not in (RBF, LINEAR):
            raise InputError(f"unknown kernel family: {self.family!r}")
        if self.family == RBF:
            if not (self.variance > 0.0):
                raise InputError("RBF variance must be positive")
            if not (self.length_scale > 0.0):
                raise InputError("RBF length scale must be positive")


def _as_vector(v, name):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise InputError(f"{name} must be a nonempty 1-d vector, got shape {v.shape}")
    return v


def _check_pair(p, q):
    p = _as_vector(p, "p")
    q = _as_vector(q, "q")
    if p.shape != q.shape:
        raise InputError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return p, q


def eval_kernel(spec: KernelSpec, p, q) -> float:
    """Evaluate K(p, q) for the given family."""
    p, q = _check_pair(p, q)
    if spec.family == LINEAR:
        return float(p @ q)
    r2 = _sqdist(p, q)
    return float(spec.variance * np.exp(-0.5 * r2 / spec.length_scale**2))


def _sqdist(p, q):
    # expanded form with clamping so near-duplicate points cannot
    # produce a negative squared distance
    r2 = p @ p - 2.0 * (p @ q) + q @ q
    return max(r2, 0.0)


def kernel_grad_p(spec: KernelSpec, p, q) -> np.ndarray:
    """Gradient of K(p, q) with respect to the first argument."""
    p, q = _check_pair(p, q)
    if spec.family == LINEAR:
        return q.copy()
    k = spec.variance * np.exp(-0.5 * _sqdist(p, q) / spec.length_scale**2)
    return -(k / spec.length_scale**2) * (p - q)


def kernel_cross_hessian(spec: KernelSpec, p, q) -> np.ndarray:
    """Matrix of mixed second derivatives d^2 K / dp_a dq_b."""
    p, q = _check_pair(p, q)
    d = p.size
    if spec.family == LINEAR:
        return np.eye(d)
    ell2 = spec.length_scale**2
    k = spec.variance * np.exp(-0.5 * _sqdist(p, q) / ell2)
    diff = p - q
    return (k / ell2) * (np.eye(d) - np.outer(diff, diff) / ell2)


def gram(spec: KernelSpec, A, B) -> np.ndarray:
    """Gram matrix with entry (i, j) = K(column i of A, column j of B).

    Inputs are d x r and d x s matrices of column points.  ``gram(spec, A, A)``
    is symmetrized exactly so downstream factorizations see a bitwise
    symmetric matrix.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2:
        raise InputError("gram expects 2-d arrays of column points")
    if A.shape[0] != B.shape[0]:
        raise InputError(f"row-dimension mismatch: {A.shape[0]} vs {B.shape[0]}")
    if spec.family == LINEAR:
        G = A.T @ B
    else:
        a2 = np.sum(A * A, axis=0)
        b2 = np.sum(B * B, axis=0)
        r2 = a2[:, None] - 2.0 * (A.T @ B) + b2[None, :]
        np.maximum(r2, 0.0, out=r2)
        G = spec.variance * np.exp(-0.5 * r2 / spec.length_scale**2)
    if A is B or (A.shape == B.shape and np.array_equal(A, B)):
        G = 0.5 * (G + G.T)
    return G


def gram_grad(spec: KernelSpec, X, p) -> np.ndarray:
    """Stacked gradients: row j is the gradient of K(x_j, p) w.r.t. p.

    X holds column points (d x N); the result is N x d.  Equivalent to
    calling :func:`kernel_grad_p` at (p, x_j) for every column, vectorized.
    """
    X = np.asarray(X, dtype=float)
    p = _as_vector(p, "p")
    if X.ndim != 2 or X.shape[0] != p.size:
        raise InputError(f"X must be d x N with d = {p.size}, got {X.shape}")
    if spec.family == LINEAR:
        return X.T.copy()
    diff = p[None, :] - X.T  # N x d
    r2 = np.maximum(np.sum(diff * diff, axis=1), 0.0)
    k = spec.variance * np.exp(-0.5 * r2 / spec.length_scale**2)
    return -(k / spec.length_scale**2)[:, None] * diff
