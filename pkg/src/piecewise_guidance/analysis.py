"""KL divergences between the true and approximated measurement likelihoods.

Under ``x_t = sqrt(ab) x_0 + sqrt(1 - ab) v`` the true likelihood of ``y``
given ``x_t`` (noise ``v`` known) and the low-noise approximation are both
Gaussians with covariance ``sigma_z^2 I``; their KL has the closed form
``(1 / (2 sigma_z^2)) (1 - ab) / ab ||C v||^2``.  The helpers here build
the explicit Gaussian pairs so the closed forms can be checked against the
general Gaussian KL.
"""

from __future__ import annotations

from dataclasses import dataclass

import mpmath
import numpy as np
from scipy import linalg

from .operators import DenseOperator, LinearOperator
from .schedule import NoiseSchedule

__all__ = [
    "GaussianDist",
    "TheoremMismatch",
    "gaussian_kl",
    "gaussian_kl_mp",
    "gaussian_kl_monte_carlo",
    "theorem1_pair",
    "theorem2_pair",
    "kl_theorem1",
    "kl_theorem2",
    "kl_theorem1_mp",
    "kl_theorem2_mp",
    "lemma_kl_theorem2_mp",
    "coefficient_curve",
    "TheoremTrial",
    "theorem_suite",
]


class TheoremMismatch(AssertionError):
    """Closed-form divergence disagrees with the general Gaussian KL."""


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        cov = np.array(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def logpdf(self, x) -> np.ndarray:
        L = linalg.cholesky(self.cov, lower=True)
        z = linalg.solve_triangular(L, (np.atleast_2d(x) - self.mean).T, lower=True)
        return (-0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L)))
                - 0.5 * self.dim * np.log(2.0 * np.pi))


def gaussian_kl(p: GaussianDist, q: GaussianDist) -> float:
    """``KL(p || q)`` for multivariate normals."""
    if p.dim != q.dim:
        raise ValueError("distributions must have equal dimension")
    k = p.dim
    Lp = linalg.cholesky(p.cov, lower=True)
    Lq = linalg.cholesky(q.cov, lower=True)
    logdet_ratio = 2.0 * (np.sum(np.log(np.diag(Lq))) - np.sum(np.log(np.diag(Lp))))
    # tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2
    A = linalg.solve_triangular(Lq, Lp, lower=True)
    dm = linalg.solve_triangular(Lq, q.mean - p.mean, lower=True)
    return float(0.5 * (logdet_ratio - k + np.sum(A * A) + dm @ dm))


def _kl_mp(mu1, S1, mu2, S2):
    k = S1.rows
    S2_inv = mpmath.inverse(S2)
    dm = mu2 - mu1
    tr = mpmath.fsum(S2_inv[i, j] * S1[j, i] for i in range(k) for j in range(k))
    quad = (dm.T * S2_inv * dm)[0, 0]
    logdet = mpmath.log(mpmath.det(S2)) - mpmath.log(mpmath.det(S1))
    return (logdet - k + tr + quad) / 2


def gaussian_kl_mp(p: GaussianDist, q: GaussianDist, dps: int = 50) -> mpmath.mpf:
    """Same as :func:`gaussian_kl` evaluated in ``dps``-digit arithmetic.

    Inputs are taken as exact binary floats, so the result carries no
    float64 rounding.  Meant for small dimensions.
    """
    if p.dim != q.dim:
        raise ValueError("distributions must have equal dimension")
    with mpmath.workdps(dps):
        return _kl_mp(mpmath.matrix(p.mean.tolist()), mpmath.matrix(p.cov.tolist()),
                      mpmath.matrix(q.mean.tolist()), mpmath.matrix(q.cov.tolist()))


def gaussian_kl_monte_carlo(p: GaussianDist, q: GaussianDist, n_samples: int,
                            rng: np.random.Generator, antithetic: bool = True) -> float:
    """Estimate ``E_p[log p - log q]``; antithetic pairs cut the variance."""
    half = n_samples // 2 if antithetic else n_samples
    z = rng.standard_normal((half, p.dim))
    if antithetic:
        z = np.concatenate([z, -z])
    x = p.mean + z @ linalg.cholesky(p.cov, lower=True).T
    return float(np.mean(p.logpdf(x) - q.logpdf(x)))


def _theorem_setup(op, s, t, v_t, sigma_z, x_t):
    if not sigma_z > 0.0:
        raise ValueError(f"sigma_z must be positive, got {sigma_z}")
    a = s.ab(s.check_t(t))
    v_t = np.asarray(v_t, dtype=np.float64)
    x_t = np.zeros(op.n) if x_t is None else np.asarray(x_t, dtype=np.float64)
    return a, v_t, x_t


def theorem2_pair(op: LinearOperator, s: NoiseSchedule, t: int, v_t, v_hat, sigma_z: float,
                  x_t=None) -> tuple[GaussianDist, GaussianDist]:
    """True likelihood of ``y`` (noise ``v_t``) and its denoiser-based approximation (noise ``v_hat``).

    Both are ``N(C x_t / sqrt(ab) - sqrt(1 - ab) / sqrt(ab) C v, sigma_z^2 I)``
    with ``v = v_t`` and ``v = v_hat`` respectively.
    """
    a, v_t, x_t = _theorem_setup(op, s, t, v_t, sigma_z, x_t)
    base = op.apply(x_t) / np.sqrt(a)
    coef = np.sqrt(1.0 - a) / np.sqrt(a)
    cov = sigma_z ** 2 * np.eye(op.m)
    true = GaussianDist(base - coef * op.apply(v_t), cov)
    approx = GaussianDist(base - coef * op.apply(np.asarray(v_hat, dtype=np.float64)), cov)
    return true, approx


def theorem1_pair(op: LinearOperator, s: NoiseSchedule, t: int, v_t, sigma_z: float,
                  x_t=None) -> tuple[GaussianDist, GaussianDist]:
    """The low-noise approximation drops the noise term, i.e. ``v_hat = 0``."""
    return theorem2_pair(op, s, t, v_t, np.zeros(op.n), sigma_z, x_t)


def _check(closed, pair, rtol):
    lemma = gaussian_kl(*pair)
    if abs(closed - lemma) > rtol * max(1.0, abs(closed)):
        raise TheoremMismatch(f"closed form {closed!r} != Gaussian KL {lemma!r}")


def kl_theorem2(op: LinearOperator, s: NoiseSchedule, t: int, v_t, v_hat, sigma_z: float,
                x_t=None, check: bool = True, rtol: float = 1e-10) -> float:
    """``(1 / (2 sigma_z^2)) (1 - ab) / ab ||C (v_t - v_hat)||^2``.

    With ``check`` the value is compared against :func:`gaussian_kl` of
    :func:`theorem2_pair` (float64, so the tolerance is relative for values
    above 1).
    """
    a, v_t, x_t = _theorem_setup(op, s, t, v_t, sigma_z, x_t)
    Cd = op.apply(v_t - np.asarray(v_hat, dtype=np.float64))
    closed = float((1.0 - a) / a * (Cd @ Cd) / (2.0 * sigma_z ** 2))
    if check:
        _check(closed, theorem2_pair(op, s, t, v_t, v_hat, sigma_z, x_t), rtol)
    return closed


def kl_theorem1(op: LinearOperator, s: NoiseSchedule, t: int, v_t, sigma_z: float,
                x_t=None, check: bool = True, rtol: float = 1e-10) -> float:
    """``(1 / (2 sigma_z^2)) (1 - ab) / ab ||C v_t||^2``."""
    a, v_t, x_t = _theorem_setup(op, s, t, v_t, sigma_z, x_t)
    Cv = op.apply(v_t)
    closed = float((1.0 - a) / a * (Cv @ Cv) / (2.0 * sigma_z ** 2))
    if check:
        _check(closed, theorem1_pair(op, s, t, v_t, sigma_z, x_t), rtol)
    return closed


def kl_theorem2_mp(C: np.ndarray, alpha_bar: float, v_t, v_hat, sigma_z: float,
                   dps: int = 50) -> mpmath.mpf:
    """Closed form of :func:`kl_theorem2` in extended precision for an explicit matrix."""
    with mpmath.workdps(dps):
        a = mpmath.mpf(alpha_bar)
        d = mpmath.matrix([mpmath.mpf(u) - mpmath.mpf(w) for u, w in zip(v_t, v_hat)])
        Cd = mpmath.matrix(np.asarray(C).tolist()) * d
        sq = mpmath.fsum(Cd[i] ** 2 for i in range(Cd.rows))
        return (1 - a) / a * sq / (2 * mpmath.mpf(sigma_z) ** 2)


def kl_theorem1_mp(C: np.ndarray, alpha_bar: float, v_t, sigma_z: float,
                   dps: int = 50) -> mpmath.mpf:
    return kl_theorem2_mp(C, alpha_bar, v_t, np.zeros(len(v_t)), sigma_z, dps)


def lemma_kl_theorem2_mp(C: np.ndarray, alpha_bar: float, x_t, v_t, v_hat, sigma_z: float,
                         dps: int = 50) -> mpmath.mpf:
    """Build the two likelihood Gaussians in extended precision and take their KL."""
    with mpmath.workdps(dps):
        Cm = mpmath.matrix(np.asarray(C).tolist())
        a = mpmath.mpf(alpha_bar)
        base = Cm * mpmath.matrix(list(map(float, x_t))) / mpmath.sqrt(a)
        coef = mpmath.sqrt(1 - a) / mpmath.sqrt(a)
        mu_true = base - coef * (Cm * mpmath.matrix(list(map(float, v_t))))
        mu_approx = base - coef * (Cm * mpmath.matrix(list(map(float, v_hat))))
        cov = mpmath.mpf(sigma_z) ** 2 * mpmath.eye(Cm.rows)
        return _kl_mp(mu_true, cov, mu_approx, cov)


def coefficient_curve(s: NoiseSchedule) -> np.ndarray:
    """Rows ``(t, (1 - ab_t) / ab_t)`` for ``t = 1..T``."""
    t = np.arange(1, s.T + 1, dtype=np.float64)
    return np.column_stack([t, (1.0 - s.alpha_bar) / s.alpha_bar])


@dataclass(frozen=True)
class TheoremTrial:
    trial: int
    theorem: int
    t: int
    sigma_z: float
    closed_form: float
    lemma1_value: float
    mc_estimate: float

    @property
    def abs_err(self) -> float:
        return abs(self.closed_form - self.lemma1_value)


def theorem_suite(s: NoiseSchedule, n_trials: int = 100, seed: int = 0,
                  shape: tuple[int, int] = (4, 6),
                  timesteps=(1, 250, 500, 750, 1000), sigmas=(0.1, 1.0),
                  mc_samples: int = 20000, fault: float = 0.0) -> list[TheoremTrial]:
    """Random executable checks of both closed forms against Lemma-1 KL.

    Each trial draws a dense ``C``, a timestep, a noise level, ``x_t``,
    ``v_t`` and a denoiser estimate ``v_hat``.  Closed form and Lemma-1
    value are both evaluated in 50-digit arithmetic from the same float64
    inputs and then rounded, so they agree to the last bit unless a formula
    is wrong.  ``fault`` is added to every closed form (harness self-test).
    The Monte-Carlo column is an independent float64 estimate.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    steps = [t for t in timesteps if 1 <= t <= s.T]
    m, n = shape
    rows = []
    for trial in range(n_trials):
        C = rng.standard_normal((m, n))
        t = int(steps[rng.integers(len(steps))])
        sigma_z = float(sigmas[rng.integers(len(sigmas))])
        x_t = rng.standard_normal(n)
        v_t = rng.standard_normal(n)
        v_hat = v_t + 0.3 * rng.standard_normal(n)
        a = s.ab(t)
        op = DenseOperator(C)
        for theorem, vh in ((1, np.zeros(n)), (2, v_hat)):
            closed = float(kl_theorem2_mp(C, a, v_t, vh, sigma_z)) + fault
            lemma = float(lemma_kl_theorem2_mp(C, a, x_t, v_t, vh, sigma_z))
            p, q = theorem2_pair(op, s, t, v_t, vh, sigma_z, x_t)
            mc = gaussian_kl_monte_carlo(p, q, mc_samples, rng)
            rows.append(TheoremTrial(trial, theorem, t, sigma_z, closed, lemma, mc))
    return rows

