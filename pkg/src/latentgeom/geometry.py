"""Deterministic Riemannian machinery over latent space.

A metric field assigns a symmetric PSD d x d matrix to every latent
point.  Curves are discrete node polylines; length and energy use the
composite midpoint rule (midpoints avoid evaluating learned metrics
exactly at training points, where posterior variance vanishes).
Geodesics come from direct energy minimization over interior nodes,
with metric derivatives taken by central finite differences so every
metric-field variant is treated uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import psd_factor
from .errors import InputError, NumericalError
from .gp import PosteriorGP

# negative quadratic forms are clamped to zero below this relative magnitude
NEG_CLAMP_REL = 1e-9


class MetricField:
    """Evaluator mapping a latent point to a symmetric PSD matrix.

    Construct via :meth:`from_posterior` (expected metric of a fitted GP),
    :meth:`constant`, or directly from any callable for tests.  Returned
    matrices are symmetrized; smoothness is assumed, not checked.
    """

    def __init__(self, fn):
        self._fn = fn

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        M = np.asarray(self._fn(z), dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise InputError(f"metric evaluation returned shape {M.shape}")
        return 0.5 * (M + M.T)

    @classmethod
    def from_posterior(cls, post: PosteriorGP) -> "MetricField":
        return cls(lambda z: expected_metric(post, z))

    @classmethod
    def constant(cls, M0) -> "MetricField":
        M0 = 0.5 * (np.asarray(M0, dtype=float) + np.asarray(M0, dtype=float).T)
        return cls(lambda z: M0)


def expected_metric(post: PosteriorGP, p) -> np.ndarray:
    """Mean pullback metric J_mu^T J_mu + m * grad_cov(p, p).

    The first term is the contribution of the posterior mean map, the
    second collects the variance of each of the m independent output
    gradients.
    """
    J = post.mean_jacobian(p)
    C = post.grad_cov(p, p)
    M = J.T @ J + post.ambient_dim * C
    return 0.5 * (M + M.T)


def sample_metric(post: PosteriorGP, p, rng: np.random.Generator, size: int | None = None):
    """Draw pullback metrics J^T J from the posterior Jacobian law.

    Rows of J are independent across output dimensions, each Gaussian with
    mean the corresponding row of the posterior mean Jacobian and shared
    covariance grad_cov(p, p).  With ``size=None`` one d x d sample is
    returned, otherwise an array of shape (size, d, d).
    """
    J_mu = post.mean_jacobian(p)
    C = post.grad_cov(p, p)
    F = psd_factor(C)
    m, d = J_mu.shape
    if size is None:
        J = J_mu + rng.standard_normal((m, d)) @ F.T
        return J.T @ J
    E = rng.standard_normal((size, m, d))
    J = J_mu[None] + E @ F.T
    return np.einsum("smi,smj->sij", J, J)


@dataclass(frozen=True)
class DiscreteCurve:
    """Ordered nodes with strictly increasing parameter values."""

    params: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.params, dtype=float)
        z = np.asarray(self.points, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if t.ndim != 1 or z.ndim != 2 or t.size != z.shape[0]:
            raise InputError(f"params {t.shape} and points {z.shape} do not align")
        if t.size < 2:
            raise InputError("a curve needs at least two nodes")
        if not np.all(np.diff(t) > 0):
            raise InputError("curve parameters must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(z))):
            raise InputError("curve contains non-finite values")
        object.__setattr__(self, "params", t)
        object.__setattr__(self, "points", z)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def num_segments(self) -> int:
        return self.params.size - 1

    def velocities(self) -> np.ndarray:
        dt = np.diff(self.params)
        return np.diff(self.points, axis=0) / dt[:, None]

    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.points[:-1] + self.points[1:])

    @staticmethod
    def line(z_a, z_b, nodes: int, a: float = 0.0, b: float = 1.0) -> "DiscreteCurve":
        """Straight line with ``nodes`` uniform segments on [a, b]."""
        z_a = np.atleast_1d(np.asarray(z_a, dtype=float))
        z_b = np.atleast_1d(np.asarray(z_b, dtype=float))
        if z_a.shape != z_b.shape:
            raise InputError("endpoints must share a dimension")
        if nodes < 1:
            raise InputError("need at least one segment")
        w = np.linspace(0.0, 1.0, nodes + 1)
        return DiscreteCurve(
            np.linspace(a, b, nodes + 1), (1.0 - w)[:, None] * z_a + w[:, None] * z_b
        )

    def resample(self, t_new) -> "DiscreteCurve":
        """Piecewise-linear resampling at new parameter values."""
        t_new = np.asarray(t_new, dtype=float)
        pts = np.column_stack(
            [np.interp(t_new, self.params, self.points[:, a]) for a in range(self.dim)]
        )
        return DiscreteCurve(t_new, pts)


def _quadratic_forms(metric: MetricField, curve: DiscreteCurve) -> np.ndarray:
    """Midpoint values of v^T M v per segment, clamped at round-off."""
    v = curve.velocities()
    mids = curve.midpoints()
    q = np.empty(curve.num_segments)
    d = curve.dim
    for k in range(curve.num_segments):
        M = metric(mids[k])
        qk = float(v[k] @ M @ v[k])
        if qk < 0.0:
            scale = (np.trace(M) / d) * float(v[k] @ v[k])
            if qk < -NEG_CLAMP_REL * max(scale, np.finfo(float).tiny):
                raise NumericalError(
                    f"metric quadratic form {qk:.3e} is negative beyond tolerance"
                )
            qk = 0.0
        q[k] = qk
    return q


def curve_length(metric: MetricField, curve: DiscreteCurve) -> float:
    """Composite-midpoint length: sum of sqrt(v^T M v) * dt per segment."""
    dt = np.diff(curve.params)
    return float(np.sqrt(_quadratic_forms(metric, curve)) @ dt)


def curve_energy(metric: MetricField, curve: DiscreteCurve) -> float:
    """Composite-midpoint energy: half the integral of v^T M v."""
    dt = np.diff(curve.params)
    return 0.5 * float(_quadratic_forms(metric, curve) @ dt)


def segment_lengths(metric: MetricField, curve: DiscreteCurve) -> np.ndarray:
    dt = np.diff(curve.params)
    return np.sqrt(_quadratic_forms(metric, curve)) * dt


def speed_cov(metric: MetricField, curve: DiscreteCurve) -> float:
    """Coefficient of variation of segment metric speeds."""
    speeds = np.sqrt(_quadratic_forms(metric, curve))
    mean = float(np.mean(speeds))
    if mean == 0.0:
        return 0.0
    return float(np.std(speeds)) / mean


# ---------------------------------------------------------------------------
# geodesics


@dataclass(frozen=True)
class GeodesicConfig:
    """Controls for the geodesic energy minimizer."""

    nodes: int = 64
    max_iters: int = 2000
    tolerance: float = 1e-10
    fd_step: float = 1e-5
    window: int = 100


@dataclass(frozen=True)
class GeodesicResult:
    curve: DiscreteCurve
    converged: bool
    energy: float
    length: float
    iterations: int


def _energy_and_grad(metric, points, dt, fd_step):
    """Discrete energy and its gradient w.r.t. interior nodes.

    The gradient combines the exact derivative through the velocities with
    a central-finite-difference derivative of the metric at midpoints.
    """
    K = points.shape[0] - 1
    d = points.shape[1]
    v = np.diff(points, axis=0) / dt[:, None]
    mids = 0.5 * (points[:-1] + points[1:])
    Mv = np.empty((K, d))
    q = np.empty(K)
    g_mid = np.empty((K, d))  # v^T dM/dz_a v at each midpoint
    for k in range(K):
        M = metric(mids[k])
        Mv[k] = M @ v[k]
        q[k] = max(float(v[k] @ Mv[k]), 0.0)
        h = fd_step * (1.0 + float(np.linalg.norm(mids[k])))
        for a in range(d):
            zp = mids[k].copy()
            zp[a] += h
            zm = mids[k].copy()
            zm[a] -= h
            dM = (metric(zp) - metric(zm)) / (2.0 * h)
            g_mid[k, a] = float(v[k] @ dM @ v[k])
    energy = 0.5 * float(q @ dt)
    grad = np.zeros((K - 1, d))
    for j in range(1, K):
        grad[j - 1] = (
            Mv[j - 1]
            - Mv[j]
            + 0.25 * (dt[j - 1] * g_mid[j - 1] + dt[j] * g_mid[j])
        )
    return energy, grad


def geodesic(metric: MetricField, z_a, z_b, cfg: GeodesicConfig | None = None) -> GeodesicResult:
    """Locally length-minimizing curve between two latent points.

    Minimizes the discrete curve energy over interior nodes with
    backtracking gradient descent from the straight-line initialization;
    a constant-speed redistribution pass between descent cycles keeps the
    parametrization near the energy-optimal one.  Convergence means the
    relative energy decrease over the trailing window fell below
    ``cfg.tolerance`` (or the gradient vanished); otherwise the best curve
    so far is returned with ``converged=False``.
    """
    cfg = cfg or GeodesicConfig()
    z_a = np.atleast_1d(np.asarray(z_a, dtype=float))
    z_b = np.atleast_1d(np.asarray(z_b, dtype=float))
    if np.array_equal(z_a, z_b):
        curve = DiscreteCurve(np.array([0.0, 1.0]), np.vstack([z_a, z_b]))
        return GeodesicResult(curve, True, 0.0, 0.0, 0)

    curve = DiscreteCurve.line(z_a, z_b, cfg.nodes)
    dt = np.diff(curve.params)
    points = curve.points.copy()
    scale = float(np.linalg.norm(z_b - z_a))
    if cfg.nodes < 2:
        return GeodesicResult(
            curve, True, curve_energy(metric, curve), curve_length(metric, curve), 0
        )

    energy, grad = _energy_and_grad(metric, points, dt, cfg.fd_step)
    history = [energy]
    step = 0.1 * scale / (1.0 + float(np.max(np.abs(grad))))
    converged = False
    iters = 0
    reparam_budget = 3
    while iters < cfg.max_iters:
        iters += 1
        gnorm2 = float(np.sum(grad * grad))
        if gnorm2 <= (1e-14 * (1.0 + energy / max(scale, 1e-300))) ** 2:
            converged = True
            break
        accepted = False
        for _ in range(50):
            cand = points.copy()
            cand[1:-1] -= step * grad
            cand_curve = DiscreteCurve(curve.params, cand)
            try:
                cand_energy = curve_energy(metric, cand_curve)
            except NumericalError:
                cand_energy = np.inf
            if np.isfinite(cand_energy) and cand_energy < energy - 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if accepted:
            points = cand
            energy = cand_energy
        if not accepted or (
            len(history) > cfg.window
            and (history[-cfg.window - 1] - energy)
            <= cfg.tolerance * max(abs(energy), 1e-300)
        ):
            # redistribute nodes to constant speed and keep going if that
            # still lowers the energy; otherwise we are done
            if reparam_budget > 0:
                reparam_budget -= 1
                rep = reparametrize_constant_speed(
                    metric, DiscreteCurve(curve.params, points)
                )
                rep_energy = curve_energy(metric, rep)
                if rep_energy < energy * (1.0 - 1e-12):
                    points = rep.points.copy()
                    energy = rep_energy
                    history.append(energy)
                    energy, grad = _energy_and_grad(metric, points, dt, cfg.fd_step)
                    step = max(step, 1e-6 * scale)
                    continue
            converged = True
            break
        history.append(energy)
        energy, grad = _energy_and_grad(metric, points, dt, cfg.fd_step)
        step *= 2.0

    out = DiscreteCurve(curve.params, points)
    rep = reparametrize_constant_speed(metric, out)
    if curve_energy(metric, rep) <= energy * (1.0 + 1e-12):
        out = rep
    return GeodesicResult(
        out, converged, curve_energy(metric, out), curve_length(metric, out), iters
    )


def reparametrize_constant_speed(
    metric: MetricField, curve: DiscreteCurve, rel_tol: float = 1e-6, max_iters: int = 200
) -> DiscreteCurve:
    """Move nodes along the polyline until segment metric lengths are equal.

    The node count and parameter interval are preserved (parameters come
    out uniform); node positions are interpolated along the input polyline.
    Iterates the arc-length redistribution until segment lengths agree to
    ``rel_tol`` relative or the iteration stalls.
    """
    base = curve.points
    seg_e = np.linalg.norm(np.diff(base, axis=0), axis=1)
    cum_e = np.concatenate([[0.0], np.cumsum(seg_e)])
    if cum_e[-1] == 0.0 and curve_length(metric, curve) == 0.0:
        raise InputError("cannot reparametrize a zero-length curve")

    def interp_points(s):
        return np.column_stack(
            [np.interp(s, cum_e, base[:, a]) for a in range(curve.dim)]
        )

    K = curve.num_segments
    t_new = np.linspace(curve.params[0], curve.params[-1], K + 1)
    s_cur = cum_e.copy()
    pts = base.copy()
    for _ in range(max_iters):
        lengths = segment_lengths(metric, DiscreteCurve(t_new, pts))
        total = float(np.sum(lengths))
        if total == 0.0:
            raise InputError("cannot reparametrize a zero-length curve")
        spread = float(np.max(lengths) - np.min(lengths)) / (total / K)
        if spread <= rel_tol:
            break
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        targets = np.linspace(0.0, cum[-1], K + 1)
        s_cur = np.interp(targets, cum, s_cur)
        pts = interp_points(s_cur)
    return DiscreteCurve(t_new, pts)


# ---------------------------------------------------------------------------
# volume integration


def volume_integral(metric: MetricField, h, box, grid) -> float:
    """Midpoint-rule integral of h(z) * sqrt(det M(z)) over a box.

    ``box`` is a sequence of (lo, hi) pairs, one per axis (d <= 3);
    ``grid`` is the resolution per axis (scalar or per-axis sequence).
    """
    box = [(float(lo), float(hi)) for lo, hi in box]
    d = len(box)
    if d < 1 or d > 3:
        raise InputError("volume integration supports 1 <= d <= 3")
    if np.isscalar(grid):
        grid = [int(grid)] * d
    grid = [int(g) for g in grid]
    if any(g < 1 for g in grid):
        raise InputError("grid resolution must be positive")
    axes = [
        lo + (hi - lo) * (np.arange(g) + 0.5) / g for (lo, hi), g in zip(box, grid)
    ]
    cell = float(np.prod([(hi - lo) / g for (lo, hi), g in zip(box, grid)]))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    total = 0.0
    for z in pts:
        M = metric(z)
        det = float(np.linalg.det(M))
        if det < 0.0:
            scale = max((np.trace(M) / d) ** d, np.finfo(float).tiny)
            if det < -1e-12 * scale:
                raise NumericalError(f"metric determinant {det:.3e} is negative")
            det = 0.0
        total += float(h(z)) * np.sqrt(det)
    return total * cell


# ---------------------------------------------------------------------------
# swirl reparametrization demo


def swirl(z) -> np.ndarray:
    """Rotate a 2-d point by the norm-dependent angle sin(pi * ||z||).

    Norm-preserving and smooth; the identity on every circle of integer
    radius.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != 2:
        raise InputError("swirl is defined on 2-d points")
    return _rotate_by_norm_angle(z, +1.0)


def swirl_inverse(z) -> np.ndarray:
    """Inverse of :func:`swirl` (rotation by the negated angle)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != 2:
        raise InputError("swirl is defined on 2-d points")
    return _rotate_by_norm_angle(z, -1.0)


def _rotate_by_norm_angle(z, sign):
    r = np.linalg.norm(z, axis=-1)
    theta = sign * np.sin(np.pi * r)
    c, s = np.cos(theta), np.sin(theta)
    x, y = z[..., 0], z[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


# ---------------------------------------------------------------------------
# curve file I/O


def save_curve(path, curve: DiscreteCurve) -> None:
    """Write a curve as CSV with header t,z1,...,zd."""
    header = "t," + ",".join(f"z{a + 1}" for a in range(curve.dim))
    rows = [header]
    for t, z in zip(curve.params, curve.points):
        rows.append(",".join(f"{v:.17g}" for v in (t, *z)))
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def load_curve(path) -> DiscreteCurve:
    """Read a curve CSV written by :func:`save_curve`."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("t,"):
        raise InputError(f"not a curve CSV (missing 't,z1,...' header): {path}")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    if data.ndim != 2 or data.shape[1] < 2:
        raise InputError("curve CSV has no coordinate columns")
    return DiscreteCurve(data[:, 0], data[:, 1:])
