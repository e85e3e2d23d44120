"""Expected curve length versus length under the expected metric.

A curve through the latent space of a fitted GP induces a random curve
in data space.  Restricting the posterior derivative process to the
curve gives, per output dimension, a Gaussian path-derivative vector
over the curve nodes: independent across the m dimensions, sharing one
node covariance (symmetric process).  Slicing to the first n dimensions
and scaling by 1/sqrt(n) yields a family of random curves whose expected
length l_n is estimated by Monte Carlo, while the length L_n under the
expected metric has a closed form.  The relative gap (L_n - l_n)/L_n
shrinks like 1/n, and ``bound_report`` checks it against the deterministic
envelope A^2/(8 n b^4) built from the closed-form speed profiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from ._linalg import psd_factor
from .errors import InputError
from .geometry import DiscreteCurve
from .gp import PosteriorGP

MIN_SPEED = 1e-6  # m_n profiles must stay above this for the bound to apply


@dataclass(frozen=True)
class CurveProcess:
    """Posterior derivative process restricted to a curve.

    ``nodes`` are parameter values in [0, 1]; ``mean_velocities`` is
    m x (K+1) with entry (i, k) the mean derivative of output i along the
    curve at node k; ``node_cov`` is the (K+1) x (K+1) covariance of the
    path derivative, shared by all output dimensions.
    """

    nodes: np.ndarray
    mean_velocities: np.ndarray
    node_cov: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.nodes, dtype=float)
        MV = np.asarray(self.mean_velocities, dtype=float)
        C = np.asarray(self.node_cov, dtype=float)
        K1 = t.size
        if MV.ndim != 2 or MV.shape[1] != K1:
            raise InputError(f"mean_velocities must be m x {K1}, got {MV.shape}")
        if C.shape != (K1, K1):
            raise InputError(f"node_cov must be {K1} x {K1}, got {C.shape}")
        object.__setattr__(self, "nodes", t)
        object.__setattr__(self, "mean_velocities", MV)
        object.__setattr__(self, "node_cov", 0.5 * (C + C.T))

    @property
    def ambient_dim(self) -> int:
        return self.mean_velocities.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.nodes.size


@dataclass(frozen=True)
class LengthEstimate:
    """Monte Carlo expected-length result."""

    mean: float
    std_err: float
    samples: int
    seed: int

    def __post_init__(self):
        if self.std_err < 0.0:
            raise InputError("std_err must be nonnegative")
        if self.samples < 2:
            raise InputError("need at least two samples")


@dataclass(frozen=True)
class BalancedStats:
    """Moment summary of the squared norm of a normalized random vector."""

    n: int
    m_n: float
    sigma_n: float
    mu3: float
    mu4: float

    def __post_init__(self):
        if self.m_n < 0.0:
            raise InputError("m_n must be nonnegative")
        mu2 = self.sigma_n**2 / self.n
        if self.mu4 < mu2**2 - 1e-12 * max(mu2**2, 1.0):
            raise InputError("mu4 < mu2^2 violates Jensen's inequality")


# ---------------------------------------------------------------------------
# restriction of the posterior to a curve


def _central_velocities(t: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Central-difference velocities at nodes, one-sided at the ends."""
    V = np.empty_like(P)
    V[0] = (P[1] - P[0]) / (t[1] - t[0])
    V[-1] = (P[-1] - P[-2]) / (t[-1] - t[-2])
    if t.size > 2:
        V[1:-1] = (P[2:] - P[:-2]) / (t[2:] - t[:-2])[:, None]
    return V


def _hessian_contract(spec, P, V):
    """Matrix of v_j^T [d^2 K / dp dq](p_j, p_k) v_k over node pairs."""
    if spec.family == kernels.LINEAR:
        return V @ V.T
    ell2 = spec.length_scale**2
    Kmat = kernels.gram(spec, P.T, P.T)
    A = V @ V.T
    s = np.sum(V * P, axis=1)
    B = s[:, None] - V @ P.T  # v_j . (p_j - p_k)
    C = (P @ V.T) - s[None, :]  # (p_j - p_k) . v_k
    return (Kmat / ell2) * (A - B * C / ell2)


def restrict_to_curve(post: PosteriorGP, curve: DiscreteCurve, nodes: int) -> CurveProcess:
    """Resample a curve uniformly and build its derivative process.

    The curve geometry is interpolated piecewise-linearly at ``nodes``
    uniform parameters mapped onto [0, 1]; velocities are central
    differences (one-sided at the ends).
    """
    if nodes < 2:
        raise InputError("need at least two nodes")
    if curve.dim != post.latent_dim:
        raise InputError(
            f"curve dimension {curve.dim} != posterior latent dim {post.latent_dim}"
        )
    t = np.linspace(0.0, 1.0, nodes)
    t_src = np.linspace(curve.params[0], curve.params[-1], nodes)
    P = curve.resample(t_src).points  # nodes x d
    # velocities w.r.t. the unit parameter interval
    V = _central_velocities(t, P)

    MV = np.empty((post.ambient_dim, nodes))
    U = np.empty((post.num_points, nodes))
    for k in range(nodes):
        G = kernels.gram_grad(post.spec, post.X, P[k])  # N x d
        MV[:, k] = post.alpha.T @ (G @ V[k])
        U[:, k] = G @ V[k]
    C = _hessian_contract(post.spec, P, V) - U.T @ post.solve_R(U)
    return CurveProcess(t, MV, 0.5 * (C + C.T))


# ---------------------------------------------------------------------------
# closed-form speed profiles


def _check_slice(cp: CurveProcess, n: int) -> int:
    n = int(n)
    if not 1 <= n <= cp.ambient_dim:
        raise InputError(f"slice size {n} outside [1, {cp.ambient_dim}]")
    return n


def _variance_profile(cp: CurveProcess) -> np.ndarray:
    sigma2 = np.diag(cp.node_cov).copy()
    scale = max(float(np.max(sigma2)), np.finfo(float).tiny)
    if np.min(sigma2) < -1e-9 * scale:
        raise InputError(f"node_cov has negative variance {np.min(sigma2):.3e}")
    return np.maximum(sigma2, 0.0)


def m_n_profile(cp: CurveProcess, n: int) -> np.ndarray:
    """Root mean squared speed of the n-slice at each node:
    sqrt(sigma^2(t) + mean of the first n squared mean velocities)."""
    n = _check_slice(cp, n)
    musq = np.mean(cp.mean_velocities[:n] ** 2, axis=0)
    return np.sqrt(_variance_profile(cp) + musq)


def sigma_n_profile(cp: CurveProcess, n: int) -> np.ndarray:
    """Scaled standard deviation of the squared speed of the n-slice:
    sqrt(2 sigma^4 + 4 sigma^2 * mean of first n squared mean velocities),
    the Gaussian closed form for a quadratic form with shared variance."""
    n = _check_slice(cp, n)
    musq = np.mean(cp.mean_velocities[:n] ** 2, axis=0)
    sigma2 = _variance_profile(cp)
    return np.sqrt(2.0 * sigma2**2 + 4.0 * sigma2 * musq)


def length_expected_metric(cp: CurveProcess, n: int) -> float:
    """Length of the n-slice under the expected metric (trapezoid rule)."""
    return float(np.trapezoid(m_n_profile(cp, n), cp.nodes))


# ---------------------------------------------------------------------------
# Monte Carlo expected length


def _substream(seed: int, index: int) -> np.random.Generator:
    """Counter-style substream: fully determined by (seed, index)."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    )


def _mc_lengths(cp, n_values, samples, seed, antithetic, batch=16):
    """Per-replicate trapezoid lengths of the sliced random curves.

    One covariance factorization and one set of Gaussian draws (over
    max(n_values) output dimensions) is shared by all slices; each
    replicate's draws come from an order-independent substream of
    ``seed``.  With ``antithetic`` the replicate count is halved into
    +/- pairs, which cancels the first-order fluctuation of the norm.

    Returns an array of shape (len(n_values), replicates).
    """
    n_values = [int(n) for n in n_values]
    if sorted(n_values) != n_values:
        raise InputError("slice sizes must be ascending")
    F = psd_factor(cp.node_cov)
    t = cp.nodes
    max_n = n_values[-1]
    MV = cp.mean_velocities[:max_n]
    cuts = np.array([0] + n_values[:-1])
    denom = np.array(n_values, dtype=float)

    pairs = samples // 2 if antithetic else samples
    if antithetic and pairs < 2:
        antithetic, pairs = False, samples
    if pairs < 2:
        raise InputError("need at least two Monte Carlo samples")

    out = np.empty((len(n_values), pairs))
    for start in range(0, pairs, batch):
        stop = min(start + batch, pairs)
        E = np.stack(
            [_substream(seed, r).standard_normal(MV.shape) for r in range(start, stop)]
        )
        noise = E @ F.T  # (b, max_n, K+1)

        def lengths_of(paths):
            seg = np.add.reduceat(paths**2, cuts, axis=1)  # (b, len(n), K+1)
            cum = np.cumsum(seg, axis=1)
            w = np.sqrt(cum / denom[None, :, None])
            return np.trapezoid(w, t, axis=2)  # (b, len(n))

        vals = lengths_of(MV[None] + noise)
        if antithetic:
            vals = 0.5 * (vals + lengths_of(MV[None] - noise))
        out[:, start:stop] = vals.T
    return out


def expected_length_mc(
    cp: CurveProcess,
    n: int,
    samples: int = 2000,
    seed: int = 0,
    antithetic: bool = True,
) -> LengthEstimate:
    """Monte Carlo estimate of the expected length of the n-slice."""
    n = _check_slice(cp, n)
    vals = _mc_lengths(cp, [n], samples, seed, antithetic)[0]
    return LengthEstimate(
        mean=float(np.mean(vals)),
        std_err=float(np.std(vals, ddof=1)) / np.sqrt(vals.size),
        samples=(samples // 2) * 2 if antithetic and samples // 2 >= 2 else samples,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# deterministic-approximation bound report


@dataclass(frozen=True)
class BoundReport:
    """Per-slice comparison of L_n, the Monte Carlo l_n, and the envelope
    h(n) = A^2 / (8 n b^4)."""

    n: np.ndarray
    length_expected: np.ndarray  # L_n
    length_mc: np.ndarray  # l_n estimate
    std_err: np.ndarray
    rel_err: np.ndarray
    h: np.ndarray
    flagged: np.ndarray
    A: float
    b: float

    @property
    def first_n_within_bound(self) -> int | None:
        """Smallest requested n from which the padded bound holds onward."""
        ok = ~self.flagged
        for i in range(len(self.n)):
            if np.all(ok[i:]):
                return int(self.n[i])
        return None

    def rows(self):
        for i in range(len(self.n)):
            yield (
                int(self.n[i]),
                float(self.length_expected[i]),
                float(self.length_mc[i]),
                float(self.std_err[i]),
                float(self.rel_err[i]),
                float(self.h[i]),
                bool(self.flagged[i]),
            )

    def to_csv(self, path) -> None:
        lines = ["n,L_n,l_n,stderr,rel_err,h_n,flag"]
        for n, L, l, se, re_, h, fl in self.rows():
            lines.append(
                f"{n},{L:.17g},{l:.17g},{se:.17g},{re_:.17g},{h:.17g},{int(fl)}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def bound_report(
    cp: CurveProcess,
    n_list,
    samples: int = 2000,
    seed: int = 0,
    antithetic: bool = True,
) -> BoundReport:
    """Check the relative error (L_n - l_n)/L_n against A^2/(8 n b^4).

    A and b come from the closed-form profiles over the process nodes and
    all requested n, with 5% safety margins so the strict inequalities of
    the envelope are met deterministically:
    A = 1.05 * sup sigma_n(t), b = 0.95 * inf m_n(t).  Rows where the
    relative error exceeds h(n) plus four standard errors are flagged.
    """
    n_values = sorted({_check_slice(cp, n) for n in n_list})
    if not n_values:
        raise InputError("n_list must be nonempty")

    m_prof = np.stack([m_n_profile(cp, n) for n in n_values])
    s_prof = np.stack([sigma_n_profile(cp, n) for n in n_values])
    min_m = float(np.min(m_prof))
    if min_m < MIN_SPEED:
        i, k = np.unravel_index(np.argmin(m_prof), m_prof.shape)
        raise InputError(
            f"mean-speed profile {min_m:.3e} below {MIN_SPEED:g} at node "
            f"{k} (n = {n_values[i]}); the bound needs speeds bounded away from zero"
        )
    A = 1.05 * float(np.max(s_prof))
    b = 0.95 * min_m

    L = np.array([float(np.trapezoid(m_prof[i], cp.nodes)) for i in range(len(n_values))])
    vals = _mc_lengths(cp, n_values, samples, seed, antithetic)
    l_mc = vals.mean(axis=1)
    stderr = vals.std(axis=1, ddof=1) / np.sqrt(vals.shape[1])
    rel = (L - l_mc) / L
    n_arr = np.array(n_values)
    h = A**2 / (8.0 * n_arr * b**4)
    flagged = rel > h + 4.0 * stderr / L
    return BoundReport(n_arr, L, l_mc, stderr, rel, h, flagged, A, b)


# ---------------------------------------------------------------------------
# norm expansion and moment identities


def taylor_sqrt(x):
    """Cubic expansion of sqrt around 1 with its one-sided error bound.

    Returns ``(P, bound)`` where P(x) = 1 + (x-1)/2 - (x-1)^2/8 + (x-1)^3/16
    and bound = 5/16 (x-1)^4; the polynomial over-estimates the root:
    0 <= P(x) - sqrt(x) <= bound for all x >= 0, with equality of the
    bound at x = 0.  Accepts scalars or arrays.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0):
        raise InputError("taylor_sqrt requires x >= 0")
    u = x - 1.0
    P = 1.0 + 0.5 * u - 0.125 * u**2 + 0.0625 * u**3
    bound = 0.3125 * u**4
    if P.ndim == 0:
        return float(P), float(bound)
    return P, bound


def expected_norm_expansion(m_n: float, sigma_n: float, n: int) -> float:
    """Second-order expansion of the expected norm:
    m_n - sigma_n^2 / (8 n m_n^3); accurate to O(n^-2) for balanced
    sequences."""
    if not m_n > 0.0:
        raise InputError("m_n must be positive")
    if n < 1:
        raise InputError("n must be positive")
    return m_n - sigma_n**2 / (8.0 * n * m_n**3)


def balanced_stats(samples_of_components) -> BalancedStats:
    """Empirical moment summary from an S x n matrix of component samples.

    Row s holds one draw of the n components X_1..X_n; the normalized
    vector is X/sqrt(n).
    """
    S = np.asarray(samples_of_components, dtype=float)
    if S.ndim != 2 or S.shape[0] < 2:
        raise InputError("need an S x n matrix with S >= 2")
    n = S.shape[1]
    w2 = np.mean(S**2, axis=1)
    mean_w2 = float(np.mean(w2))
    centered = w2 - mean_w2
    mu2 = float(np.mean(centered**2))
    mu3 = float(np.mean(centered**3))
    mu4 = float(np.mean(centered**4))
    return BalancedStats(
        n=n,
        m_n=float(np.sqrt(max(mean_w2, 0.0))),
        sigma_n=float(np.sqrt(n * mu2)),
        mu3=mu3,
        mu4=mu4,
    )


def balanced_stats_analytic(
    n: int, ex2: float, mu2_x2: float, mu3_x2: float, mu4_x2: float
) -> BalancedStats:
    """Moment summary for iid components with known moments of X^2.

    Uses the iid identities for the central moments of the mean of n
    independent variables:

        mu3(w^2) = mu3(X^2) / n^2
        mu4(w^2) = mu4(X^2) / n^3 + 3 (n-1) mu2(X^2)^2 / n^3
    """
    if n < 1:
        raise InputError("n must be positive")
    if ex2 < 0.0 or mu2_x2 < 0.0:
        raise InputError("second moments must be nonnegative")
    return BalancedStats(
        n=n,
        m_n=float(np.sqrt(ex2)),
        sigma_n=float(np.sqrt(mu2_x2)),
        mu3=mu3_x2 / n**2,
        mu4=mu4_x2 / n**3 + 3.0 * (n - 1) * mu2_x2**2 / n**3,
    )


# ---------------------------------------------------------------------------
# mean curve versus expected length


@dataclass(frozen=True)
class MeanCurveComparison:
    """Speed of the mean curve versus the mean speed of the random curve."""

    length_of_mean: float
    expected_length: float
    std_err: float

    @property
    def gap(self) -> float:
        return self.expected_length - self.length_of_mean


def mean_curve_vs_expected_length(
    cp: CurveProcess,
    n: int,
    samples: int = 2000,
    seed: int = 0,
) -> MeanCurveComparison:
    """Length of the mean curve against the Monte Carlo expected length.

    The gap is the integrated variance contribution at leading order:
    averaging the curve first discards all derivative variance, so the
    mean curve is shorter whenever the process has noise.
    """
    n = _check_slice(cp, n)
    mean_speed = np.sqrt(np.mean(cp.mean_velocities[:n] ** 2, axis=0))
    len_mean = float(np.trapezoid(mean_speed, cp.nodes))
    est = expected_length_mc(cp, n, samples=samples, seed=seed)
    return MeanCurveComparison(len_mean, est.mean, est.std_err)
