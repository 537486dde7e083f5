"""Score-model contract and analytic Gaussian-mixture backends.

A Gaussian-mixture prior stays a Gaussian mixture under the forward process::

    p_t(x_t) = sum_i w_i N(x_t; sqrt(ab_t) mu_i, ab_t Sigma_i + (1 - ab_t) I)

so its score, the Tweedie denoiser and the denoiser Jacobian are all
available in closed form.  Each covariance is diagonalised once
(``Sigma_i = U_i diag(lam_i) U_i^T``); the marginal covariance at any ``t``
shares the eigenvectors and has eigenvalues ``ab_t lam_i + 1 - ab_t``.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .operators import LinearOperator
from .schedule import NoiseSchedule

__all__ = [
    "ScoreModel",
    "GmmPrior",
    "GmmScoreModel",
    "CallCounter",
    "gmm_marginal_logpdf",
    "gmm_score",
    "gmm_predict_noise",
    "gmm_denoise",
    "gmm_vjp_denoise",
    "gaussian_exact_posterior",
    "forward_diffuse",
    "finite_difference_vjp",
    "load_gmm",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


class ScoreModel(Protocol):
    """What the sampler and guidance need from a diffusion model.

    Inputs may carry leading batch axes; the last axis has size ``dim``.
    """

    dim: int
    counter: "CallCounter"

    def predict_noise(self, x_t, t: int) -> np.ndarray: ...

    def denoise(self, x_t, t: int) -> np.ndarray: ...

    def vjp_denoise(self, x_t, t: int, w) -> np.ndarray: ...


class CallCounter:
    """Thread-safe tally of model calls keyed by operation name."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = Counter()

    def bump(self, name: str) -> None:
        with self._lock:
            self._counts[name] += 1

    def __getitem__(self, name: str) -> int:
        with self._lock:
            return self._counts[name]

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()


@dataclass(frozen=True)
class GmmPrior:
    """Mixture ``sum_i w_i N(mu_i, Sigma_i)`` over ``R^n``."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _eig: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        cov = np.array(self.covs, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[None, :]
        if cov.ndim == 2:
            cov = cov[None, :, :]
        k, n = mu.shape
        if w.shape != (k,) or cov.shape != (k, n, n):
            raise ValueError(
                f"inconsistent GMM shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}")
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0.0, atol=1e-12):
            raise ValueError("component covariances must be symmetric")
        for i in range(k):
            try:
                linalg.cholesky(cov[i], lower=True)
            except linalg.LinAlgError as exc:
                raise ValueError(f"covariance of component {i} is not positive definite") from exc
        lam, U = np.linalg.eigh(cov)
        for a in (w, mu, cov, lam, U):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)
        object.__setattr__(self, "_eig", (lam, U))

    @classmethod
    def gaussian(cls, mean, cov) -> "GmmPrior":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(np.ones(1), mean[None, :], np.asarray(cov, dtype=np.float64)[None])

    @classmethod
    def standard_normal(cls, n: int) -> "GmmPrior":
        return cls.gaussian(np.zeros(n), np.eye(n))

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        lam, U = self._eig
        comp = rng.choice(self.n_components, size=size, p=self.weights)
        z = rng.standard_normal((size, self.dim))
        x = np.einsum("bij,bj->bi", U[comp], np.sqrt(lam[comp]) * z)
        return x + self.means[comp]


def _marginal_terms(prior: GmmPrior, a: float, x):
    """Per-component quantities of the marginal at ``alpha_bar = a``.

    Returns ``(x, log_joint, g)`` where ``log_joint[..., i]`` is
    ``log w_i + log N(x; sqrt(a) mu_i, S_i)`` and ``g[..., i, :]`` is the
    component score ``-S_i^{-1} (x - sqrt(a) mu_i)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != prior.dim:
        raise ValueError(f"expected trailing dimension {prior.dim}, got {x.shape}")
    lam, U = prior._eig
    s = a * lam + (1.0 - a)                                   # (K, n)
    d = x[..., None, :] - np.sqrt(a) * prior.means            # (..., K, n)
    z = np.einsum("...kn,knm->...km", d, U)                    # eigen coordinates
    zs = z / s
    quad = np.sum(z * zs, axis=-1)
    logdet = np.sum(np.log(s), axis=-1)
    log_joint = np.log(prior.weights) - 0.5 * (quad + logdet + prior.dim * _LOG_2PI)
    g = -np.einsum("...km,knm->...kn", zs, U)
    return x, log_joint, g, (s, U)


def _responsibilities(log_joint):
    # max-subtracted softmax
    shifted = log_joint - np.max(log_joint, axis=-1, keepdims=True)
    r = np.exp(shifted)
    return r / np.sum(r, axis=-1, keepdims=True)


def gmm_marginal_logpdf(prior: GmmPrior, s: NoiseSchedule, t: int, x_t):
    """Log density of ``x_t`` under the forward-diffused mixture (``t = 0`` is the prior)."""
    _, log_joint, _, _ = _marginal_terms(prior, s.ab(t), x_t)
    return logsumexp(log_joint, axis=-1)


def gmm_score(prior: GmmPrior, s: NoiseSchedule, t: int, x_t):
    _, log_joint, g, _ = _marginal_terms(prior, s.ab(t), x_t)
    r = _responsibilities(log_joint)
    return np.einsum("...k,...kn->...n", r, g)


def gmm_predict_noise(prior: GmmPrior, s: NoiseSchedule, t: int, x_t):
    t = s.check_t(t)
    return -np.sqrt(1.0 - s.ab(t)) * gmm_score(prior, s, t, x_t)


def gmm_denoise(prior: GmmPrior, s: NoiseSchedule, t: int, x_t):
    """Posterior mean ``E[x_0 | x_t]`` via Tweedie's formula."""
    t = s.check_t(t)
    a = s.ab(t)
    eps = gmm_predict_noise(prior, s, t, x_t)
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - a) * eps) / np.sqrt(a)


def gmm_vjp_denoise(prior: GmmPrior, s: NoiseSchedule, t: int, x_t, w):
    """``(d x0_hat / d x_t)^T w`` from the analytic log-density Hessian.

    ``d x0_hat / d x_t = (I + (1 - ab_t) H) / sqrt(ab_t)`` with ``H`` the
    (symmetric) Hessian of ``log p_t``::

        H = sum_i r_i (g_i g_i^T - S_i^{-1}) - score score^T
    """
    t = s.check_t(t)
    a = s.ab(t)
    _, log_joint, g, (sc, U) = _marginal_terms(prior, a, x_t)
    w = np.asarray(w, dtype=np.float64)
    r = _responsibilities(log_joint)
    score = np.einsum("...k,...kn->...n", r, g)
    gw = np.einsum("...kn,...n->...k", g, w)
    # S_i^{-1} w through the eigenbasis
    wz = np.einsum("...n,knm->...km", w, U) / sc
    sinv_w = np.einsum("...km,knm->...kn", wz, U)
    hw = (np.einsum("...k,...kn->...n", r * gw, g)
          - np.einsum("...k,...kn->...n", r, sinv_w)
          - score * np.sum(score * w, axis=-1, keepdims=True))
    return (w + (1.0 - a) * hw) / np.sqrt(a)


class GmmScoreModel:
    """:class:`ScoreModel` backed by an exact Gaussian-mixture prior."""

    def __init__(self, prior: GmmPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule
        self.dim = prior.dim
        self.counter = CallCounter()

    def predict_noise(self, x_t, t):
        self.counter.bump("predict_noise")
        return gmm_predict_noise(self.prior, self.schedule, t, x_t)

    def denoise(self, x_t, t):
        self.counter.bump("denoise")
        return gmm_denoise(self.prior, self.schedule, t, x_t)

    def vjp_denoise(self, x_t, t, w):
        self.counter.bump("vjp_denoise")
        return gmm_vjp_denoise(self.prior, self.schedule, t, x_t, w)

    def score(self, x_t, t):
        return gmm_score(self.prior, self.schedule, t, x_t)


def finite_difference_vjp(denoise: Callable, x_t, t: int, w, step: float = 1e-5):
    """Central-difference ``(d denoise / d x)^T w`` for a black-box denoiser.

    Costs ``2 n`` denoiser evaluations; ``x_t`` and ``w`` are single vectors.
    """
    x = np.asarray(x_t, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        col = (np.asarray(denoise(x + e, t)) - np.asarray(denoise(x - e, t))) / (2.0 * step)
        out[j] = col @ w
    return out


def gaussian_exact_posterior(mu0, Sigma0, op: LinearOperator, y, sigma_z: float):
    """Conjugate posterior of ``x ~ N(mu0, Sigma0)`` given ``y = C x + z``."""
    if not sigma_z > 0.0:
        raise ValueError("exact posterior needs sigma_z > 0")
    mu0 = np.asarray(mu0, dtype=np.float64)
    Sigma0 = np.asarray(Sigma0, dtype=np.float64)
    C = op.to_dense()
    prior_cho = linalg.cho_factor(Sigma0, lower=True)
    prec = linalg.cho_solve(prior_cho, np.eye(mu0.size)) + C.T @ C / sigma_z ** 2
    prec = 0.5 * (prec + prec.T)
    post_cho = linalg.cho_factor(prec, lower=True)
    Sigma_post = linalg.cho_solve(post_cho, np.eye(mu0.size))
    rhs = linalg.cho_solve(prior_cho, mu0) + C.T @ np.asarray(y, dtype=np.float64) / sigma_z ** 2
    mu_post = linalg.cho_solve(post_cho, rhs)
    return mu_post, 0.5 * (Sigma_post + Sigma_post.T)


def forward_diffuse(s: NoiseSchedule, t: int, x0, eps):
    a = s.ab(t)
    return np.sqrt(a) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - a) * np.asarray(eps, dtype=np.float64)


def load_gmm(path) -> GmmPrior:
    """Read a mixture from a plain-text file.

    Layout (whitespace separated, ``#`` comments allowed): ``K n`` followed,
    for each component, by its weight, its ``n`` mean entries and its
    ``n * n`` covariance entries in row-major order.
    """
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    vals = np.array(tokens, dtype=np.float64)
    k, n = int(vals[0]), int(vals[1])
    per = 1 + n + n * n
    body = vals[2:]
    if body.size != k * per:
        raise ValueError(f"{path}: expected {k * per} numbers after header, found {body.size}")
    body = body.reshape(k, per)
    return GmmPrior(body[:, 0], body[:, 1:1 + n], body[:, 1 + n:].reshape(k, n, n))
