"""Shared factorization helpers with jitter escalation."""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NumericalError

# jitter is relative to the mean diagonal; escalates by 10x per retry
JITTER_START = 1e-10
JITTER_MAX = 1e-6


def chol_jitter(M: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of M + jitter*mean(diag(M))*I.

    The jitter starts at ``JITTER_START`` and is multiplied by 10 on each
    failure up to ``JITTER_MAX``; beyond that a :class:`NumericalError` is
    raised carrying an estimate of the smallest eigenvalue.

    Returns the factor and the absolute jitter that was added.
    """
    M = np.asarray(M, dtype=float)
    scale = float(np.mean(np.diag(M)))
    jitter = JITTER_START
    while True:
        eps = jitter * scale
        try:
            L = scipy.linalg.cholesky(M + eps * np.eye(M.shape[0]), lower=True)
            return L, eps
        except scipy.linalg.LinAlgError:
            if jitter >= JITTER_MAX:
                min_eig = float(np.min(scipy.linalg.eigvalsh(M)))
                raise NumericalError(
                    "Cholesky failed after jitter escalation to "
                    f"{JITTER_MAX:g} (min eigenvalue ~ {min_eig:.3e})"
                ) from None
            jitter *= 10.0


def psd_factor(C: np.ndarray, rel_tol: float = 1e-9) -> np.ndarray:
    """Factor F with F F^T = C for a symmetric PSD matrix C.

    Uses an eigendecomposition with the negative round-off floor clamped
    at zero, so exactly-singular covariances (including the zero matrix)
    factor cleanly.  Eigenvalues below ``-rel_tol * max_eig`` are treated
    as genuine PSD violations.
    """
    C = np.asarray(C, dtype=float)
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)
    top = max(float(w[-1]), 0.0)
    if float(w[0]) < -rel_tol * max(top, np.finfo(float).tiny):
        raise NumericalError(
            f"matrix is not PSD: min eigenvalue {w[0]:.3e} vs max {top:.3e}"
        )
    return V * np.sqrt(np.maximum(w, 0.0))
