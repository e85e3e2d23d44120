"""GPLVM fitting and the resulting Gaussian-process posterior.

The model is a symmetric vector-valued GP: m independent output
dimensions sharing one prior kernel K and observation-noise variance.
With latent points X (d x N), data Y (m x N) and R(X) = K(X,X) + noise*I,
the posterior over latent functions has

    mean(p)   = Y R(X)^-1 K(X, p)
    cov(p, q) = K(p, q) - K(p, X) R(X)^-1 K(X, q)

per output dimension.  Derivatives of both are available in closed form
and drive all of the geometry downstream.  Observation noise enters only
through R(X); the posterior covariance used for geometry is that of the
noise-free latent function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kernels
from ._linalg import chol_jitter
from .errors import InputError, NumericalError
from .kernels import RBF, LINEAR, KernelSpec

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Dataset:
    """Observations as columns of an m x N matrix."""

    Y: np.ndarray

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2 or Y.shape[0] < 1 or Y.shape[1] < 2:
            raise InputError(f"Y must be m x N with N >= 2, got shape {Y.shape}")
        if not np.all(np.isfinite(Y)):
            raise InputError("Y contains non-finite entries")
        object.__setattr__(self, "Y", Y)

    @property
    def ambient_dim(self) -> int:
        return self.Y.shape[0]

    @property
    def num_points(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class FitConfig:
    """Controls for :func:`fit_gplvm`.

    When ``optimize_hyperparams`` is False the ``init_*`` values are used
    as fixed hyperparameters (heuristics fill in any left as None).
    """

    latent_dim: int
    max_iters: int = 500
    step_tolerance: float = 1e-8
    seed: int = 0
    optimize_hyperparams: bool = True
    family: str = RBF
    init_variance: float | None = None
    init_length_scale: float | None = None
    init_noise: float | None = None

    def __post_init__(self):
        if self.latent_dim < 1:
            raise InputError("latent_dim must be positive")
        if self.max_iters < 1:
            raise InputError("max_iters must be positive")
        if not (self.step_tolerance > 0.0):
            raise InputError("step_tolerance must be positive")


class PosteriorGP:
    """Fitted GPLVM posterior with derivative evaluations.

    Immutable after construction; all evaluation methods are pure and can
    be called concurrently.
    """

    def __init__(self, spec: KernelSpec, X, Y, noise: float):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
            raise InputError(
                f"X (d x N) and Y (m x N) must share N: {X.shape} vs {Y.shape}"
            )
        if noise < 0.0:
            raise InputError("noise variance must be nonnegative")
        self.spec = spec
        self.X = X
        self.Y = Y
        self.noise = float(noise)
        R = kernels.gram(spec, X, X) + self.noise * np.eye(X.shape[1])
        self.chol_R, self.jitter = chol_jitter(R)
        self.R = R + self.jitter * np.eye(X.shape[1])
        # alpha solves R alpha = Y^T, so mean(p) = alpha^T K(X, p)
        self.alpha = scipy.linalg.cho_solve((self.chol_R, True), Y.T)

    @property
    def latent_dim(self) -> int:
        return self.X.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.Y.shape[0]

    @property
    def num_points(self) -> int:
        return self.X.shape[1]

    def _check_point(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape != (self.latent_dim,):
            raise InputError(
                f"point must have shape ({self.latent_dim},), got {p.shape}"
            )
        return p

    def solve_R(self, B: np.ndarray) -> np.ndarray:
        """Solve R(X) Z = B using the stored factorization."""
        return scipy.linalg.cho_solve((self.chol_R, True), B)

    def kvec(self, p) -> np.ndarray:
        """Prior cross-covariances K(x_j, p) for all training latents."""
        p = self._check_point(p)
        return kernels.gram(self.spec, self.X, p[:, None])[:, 0]

    def mean(self, p) -> np.ndarray:
        """Posterior mean, an m-vector."""
        return self.alpha.T @ self.kvec(p)

    def mean_many(self, P) -> np.ndarray:
        """Posterior means at column points P (d x B), returned m x B."""
        P = np.asarray(P, dtype=float)
        return self.alpha.T @ kernels.gram(self.spec, self.X, P)

    def cov(self, p, q) -> float:
        """Posterior covariance k(p, q), one shared value per output dim."""
        kp = self.kvec(p)
        kq = kp if q is p else self.kvec(q)
        k0 = kernels.eval_kernel(self.spec, p, q)
        val = k0 - float(kp @ self.solve_R(kq))
        p_arr = np.asarray(p, dtype=float)
        q_arr = np.asarray(q, dtype=float)
        if np.array_equal(p_arr, q_arr) and val < 0.0:
            prior = kernels.eval_kernel(self.spec, p, p)
            if val < -1e-9 * max(prior, np.finfo(float).tiny):
                raise NumericalError(
                    f"posterior variance {val:.3e} below round-off tolerance"
                )
            val = 0.0
        return val

    def var(self, p) -> float:
        """Posterior variance k(p, p), clamped at zero round-off."""
        return self.cov(p, p)

    def mean_jacobian(self, p) -> np.ndarray:
        """Jacobian of the posterior mean at p, an m x d matrix."""
        G = kernels.gram_grad(self.spec, self.X, self._check_point(p))
        return self.alpha.T @ G

    def grad_cov(self, p, q) -> np.ndarray:
        """Covariance of posterior gradients: entry (a, b) is
        d^2 k(p, q) / dp_a dq_b.  Symmetrized when p equals q."""
        p = self._check_point(p)
        q = self._check_point(np.asarray(q, dtype=float))
        Gp = kernels.gram_grad(self.spec, self.X, p)
        Gq = Gp if np.array_equal(p, q) else kernels.gram_grad(self.spec, self.X, q)
        C = kernels.kernel_cross_hessian(self.spec, p, q) - Gp.T @ self.solve_R(Gq)
        if Gq is Gp:
            C = 0.5 * (C + C.T)
        return C


def make_posterior(spec: KernelSpec, X, Y, noise: float) -> PosteriorGP:
    """Construct the posterior for given latents, data, and noise."""
    return PosteriorGP(spec, X, Y, noise)


# ---------------------------------------------------------------------------
# fitting


def _pca_init(Y: np.ndarray, d: int) -> np.ndarray:
    """Top-d principal-component scores of centered Y, unit row variance."""
    Yc = Y - Y.mean(axis=1, keepdims=True)
    U, s, Vt = np.linalg.svd(Yc, full_matrices=False)
    X0 = s[:d, None] * Vt[:d]
    if X0.shape[0] < d:
        X0 = np.vstack([X0, np.zeros((d - X0.shape[0], Y.shape[1]))])
    # canonical sign: largest-magnitude score positive per latent dim
    for a in range(d):
        row = X0[a]
        if row.any():
            j = int(np.argmax(np.abs(row)))
            if row[j] < 0:
                X0[a] = -row
    std = X0.std(axis=1)
    nz = std > 0
    X0[nz] /= std[nz, None]
    return X0


def _median_pairwise(X: np.ndarray) -> float:
    d2 = (
        np.sum(X * X, axis=0)[:, None]
        - 2.0 * (X.T @ X)
        + np.sum(X * X, axis=0)[None, :]
    )
    vals = np.sqrt(np.maximum(d2[np.triu_indices(X.shape[1], k=1)], 0.0))
    vals = vals[vals > 0]
    return float(np.median(vals)) if vals.size else 1.0


class _Objective:
    """Log marginal likelihood of the shared-kernel GP, with gradients.

    Parameters are packed as [vec(X), log variance, log length_scale,
    log noise]; the hyperparameter block is present only when it is being
    optimized.
    """

    def __init__(self, Y, d, family, optimize_hyperparams, fixed):
        self.Y = Y
        self.m, self.N = Y.shape
        self.d = d
        self.family = family
        self.opt_hyp = optimize_hyperparams
        self.fixed = fixed  # (variance, length_scale, noise) when not optimized

    def pack(self, X, variance, length_scale, noise):
        parts = [X.ravel()]
        if self.opt_hyp:
            if self.family == RBF:
                parts.append(np.log([variance, length_scale]))
            parts.append(np.log([max(noise, 1e-300)]))
        return np.concatenate(parts)

    def unpack(self, theta):
        X = theta[: self.d * self.N].reshape(self.d, self.N)
        if not self.opt_hyp:
            variance, length_scale, noise = self.fixed
        else:
            rest = np.clip(theta[self.d * self.N :], -40.0, 40.0)
            if self.family == RBF:
                variance, length_scale, noise = np.exp(rest)
            else:
                variance, length_scale = 1.0, 1.0
                noise = float(np.exp(rest[0]))
        return X, float(variance), float(length_scale), float(noise)

    def spec_of(self, theta) -> KernelSpec:
        _, variance, length_scale, _ = self.unpack(theta)
        if self.family == RBF:
            return KernelSpec(RBF, variance, length_scale)
        return KernelSpec(LINEAR)

    def value(self, theta) -> float:
        X, variance, length_scale, noise = self.unpack(theta)
        spec = self.spec_of(theta)
        K = kernels.gram(spec, X, X)
        R = K + noise * np.eye(self.N)
        try:
            L, _ = chol_jitter(R)
        except NumericalError:
            return -np.inf
        alpha = scipy.linalg.cho_solve((L, True), self.Y.T)
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        quad = float(np.sum(self.Y.T * alpha))
        return -0.5 * quad - 0.5 * self.m * logdet - 0.5 * self.m * self.N * LOG_2PI

    def value_and_grad(self, theta):
        X, variance, length_scale, noise = self.unpack(theta)
        spec = self.spec_of(theta)
        K = kernels.gram(spec, X, X)
        R = K + noise * np.eye(self.N)
        try:
            L, _ = chol_jitter(R)
        except NumericalError:
            return -np.inf, np.zeros_like(theta)
        alpha = scipy.linalg.cho_solve((L, True), self.Y.T)  # N x m
        Rinv = scipy.linalg.cho_solve((L, True), np.eye(self.N))
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        quad = float(np.sum(self.Y.T * alpha))
        val = -0.5 * quad - 0.5 * self.m * logdet - 0.5 * self.m * self.N * LOG_2PI

        W = 0.5 * (alpha @ alpha.T - self.m * Rinv)  # dL/dR, symmetric
        S = 2.0 * W
        if self.family == RBF:
            SK = S * K
            col = SK.sum(axis=0)
            gX = -(X * col[None, :] - X @ SK) / length_scale**2
        else:
            gX = X @ S
        parts = [gX.ravel()]
        if self.opt_hyp:
            if self.family == RBF:
                g_logvar = float(np.sum(W * K))
                x2 = np.sum(X * X, axis=0)
                D2 = np.maximum(x2[:, None] - 2.0 * (X.T @ X) + x2[None, :], 0.0)
                g_loglen = float(np.sum(W * K * D2)) / length_scale**2
                parts.append(np.array([g_logvar, g_loglen]))
            parts.append(np.array([noise * float(np.trace(W))]))
        return val, np.concatenate(parts)


def fit_gplvm(data: Dataset, config: FitConfig):
    """Fit latent points and hyperparameters by gradient ascent on the
    log marginal likelihood.

    Initialization is PCA of the centered data scaled to unit latent
    variance, followed by backtracking-line-search ascent on X jointly
    with the log hyperparameters.  Deterministic for a fixed config.

    Returns ``(X, spec, noise, trace)`` where trace is the nondecreasing
    sequence of accepted log-likelihood values.
    """
    Y = data.Y
    m, N = Y.shape
    d = config.latent_dim
    if d > min(m, N):
        raise InputError(f"latent_dim {d} exceeds min(m, N) = {min(m, N)}")

    X0 = _pca_init(Y, d)
    v = float(np.mean((Y - Y.mean(axis=1, keepdims=True)) ** 2))
    variance = config.init_variance if config.init_variance is not None else max(v, 1e-12)
    length_scale = (
        config.init_length_scale
        if config.init_length_scale is not None
        else _median_pairwise(X0)
    )
    noise = config.init_noise if config.init_noise is not None else 1e-2 * max(v, 1e-12)

    obj = _Objective(
        Y, d, config.family, config.optimize_hyperparams, (variance, length_scale, noise)
    )
    theta = obj.pack(X0, variance, length_scale, noise)

    val, grad = obj.value_and_grad(theta)
    if not np.isfinite(val):
        raise NumericalError(
            "log likelihood is non-finite at initialization; "
            "data may be degenerate for the chosen noise level"
        )
    trace = [val]
    step = 0.1 / (1.0 + float(np.linalg.norm(grad)))
    for _ in range(config.max_iters):
        gnorm2 = float(grad @ grad)
        if gnorm2 == 0.0:
            break
        accepted = False
        for _ in range(60):
            cand = theta + step * grad
            cand_val = obj.value(cand)
            if np.isfinite(cand_val) and cand_val > val + 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        rel = (cand_val - val) / max(1.0, abs(cand_val))
        theta, val = cand, cand_val
        trace.append(val)
        val, grad = obj.value_and_grad(theta)
        step *= 2.0
        if rel < config.step_tolerance:
            break

    X, variance, length_scale, noise = obj.unpack(theta)
    spec = obj.spec_of(theta)
    return X, spec, noise, np.asarray(trace)


# ---------------------------------------------------------------------------
# model file I/O

_MAGIC = "latentgeom-model v1"


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_model(path, spec: KernelSpec, X, Y, noise: float) -> None:
    """Write a posterior definition as a plain-text header plus CSV blocks.

    Floats are printed with 17 significant digits so save/load round-trips
    bitwise.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    lines = [_MAGIC, f"family {spec.family}"]
    if spec.family == RBF:
        lines.append(f"variance {_fmt(spec.variance)}")
        lines.append(f"length_scale {_fmt(spec.length_scale)}")
    lines.append(f"noise {_fmt(noise)}")
    lines.append(f"latent_dim {X.shape[0]}")
    lines.append(f"num_points {X.shape[1]}")
    lines.append(f"ambient_dim {Y.shape[0]}")
    lines.append("X")
    lines.extend(",".join(_fmt(v) for v in row) for row in X)
    lines.append("Y")
    lines.extend(",".join(_fmt(v) for v in row) for row in Y)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path):
    """Read a model file written by :func:`save_model`.

    Returns ``(spec, X, Y, noise)``.
    """
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _MAGIC:
        raise InputError(f"not a model file (missing '{_MAGIC}' header): {path}")
    header = {}
    i = 1
    while i < len(lines) and lines[i] != "X":
        key, _, value = lines[i].partition(" ")
        if not value:
            raise InputError(f"malformed header line {i + 1}: {lines[i]!r}")
        header[key] = value
        i += 1
    try:
        family = header["family"]
        d = int(header["latent_dim"])
        N = int(header["num_points"])
        m = int(header["ambient_dim"])
        noise = float(header["noise"])
        if family == RBF:
            spec = KernelSpec(RBF, float(header["variance"]), float(header["length_scale"]))
        else:
            spec = KernelSpec(LINEAR)
    except KeyError as exc:
        raise InputError(f"model header missing key: {exc}") from None
    if i >= len(lines) or lines[i] != "X":
        raise InputError("model file missing X block")

    def read_block(start, rows, cols, name):
        block = lines[start : start + rows]
        if len(block) != rows:
            raise InputError(f"model {name} block truncated")
        M = np.array([[float(v) for v in row.split(",")] for row in block])
        if M.shape != (rows, cols):
            raise InputError(f"model {name} block has shape {M.shape}, want {(rows, cols)}")
        return M

    X = read_block(i + 1, d, N, "X")
    j = i + 1 + d
    if j >= len(lines) or lines[j] != "Y":
        raise InputError("model file missing Y block")
    Y = read_block(j + 1, m, N, "Y")
    return spec, X, Y, noise
