"""Discrete variance-preserving noise schedule and DDIM step coefficients.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar(0)`` is
defined as 1, so ``t = 1`` is the step closest to clean data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "StepCoefficients",
    "build_linear_schedule",
    "snr_inverse_coefficient",
    "ddim_coefficients",
    "guidance_step_weight",
]

# rounding slack tolerated before 1 - alpha_bar[t-1] - c1^2 is declared negative
_C2_CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-in-t beta schedule with cumulative products.

    Attributes:
        beta: Per-step noise variances, shape ``(T,)``; ``beta[t - 1]`` is
            the variance added at timestep ``t``.
        alpha_bar: Cumulative products ``prod_{i<=t} (1 - beta_i)``, shape
            ``(T,)``, again offset by one.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64)
        alpha_bar = np.array(self.alpha_bar, dtype=np.float64)
        if beta.ndim != 1 or beta.shape != alpha_bar.shape or beta.size < 1:
            raise ValueError("beta and alpha_bar must be 1-D arrays of equal length")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta must lie strictly inside (0, 1)")
        beta.setflags(write=False)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        # index 0 holds alpha_bar(0) = 1
        padded = np.concatenate([[1.0], alpha_bar])
        padded.setflags(write=False)
        object.__setattr__(self, "_padded", padded)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not isinstance(t, (int, np.integer)) or not lo <= t <= self.T:
            raise ValueError(f"timestep {t!r} outside [{lo}, {self.T}]")
        return int(t)

    def ab(self, t: int) -> float:
        """``alpha_bar`` at 1-based timestep ``t`` (``t = 0`` gives 1.0)."""
        return float(self._padded[self.check_t(t, allow_zero=True)])


@dataclass(frozen=True)
class StepCoefficients:
    sqrt_alpha_bar: float
    sqrt_one_minus_alpha_bar: float
    snr_inv: float
    c1: float
    c2: float


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                          beta_end: float = 0.02) -> NoiseSchedule:
    """Betas spaced linearly from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def snr_inverse_coefficient(s: NoiseSchedule, t: int) -> float:
    """Return ``(1 - alpha_bar_t) / alpha_bar_t``."""
    a = s.ab(s.check_t(t))
    return (1.0 - a) / a


def ddim_coefficients(s: NoiseSchedule, t: int, eta: float) -> StepCoefficients:
    """DDIM noise coefficients for the step ``t -> t-1``.

    ``c1`` scales fresh Gaussian noise and ``c2`` the predicted noise; ``eta``
    interpolates between deterministic DDIM (0) and ancestral DDPM (1).
    """
    t = s.check_t(t)
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    a = s.ab(t)
    a_prev = s.ab(t - 1)
    c1 = eta * np.sqrt((1.0 - a / a_prev) * (1.0 - a_prev) / (1.0 - a))
    rem = 1.0 - a_prev - c1 * c1
    if rem < -_C2_CLAMP_TOL:
        raise ArithmeticError(
            f"1 - alpha_bar[t-1] - c1^2 = {rem:.3e} < 0 at t={t}, eta={eta}")
    c2 = np.sqrt(max(rem, 0.0))
    return StepCoefficients(
        sqrt_alpha_bar=float(np.sqrt(a)),
        sqrt_one_minus_alpha_bar=float(np.sqrt(1.0 - a)),
        snr_inv=(1.0 - a) / a,
        c1=float(c1),
        c2=float(c2),
    )


def guidance_step_weight(s: NoiseSchedule, t: int, eta: float,
                         mode: str = "posterior") -> float:
    """Multiplier applied to the guidance vector in the reverse update.

    ``"alg1"`` is the literal ``sqrt(alpha_bar_t)``.  ``"posterior"`` is the
    factor that makes the update identical to a DDIM step driven by the
    conditional score ``score(x_t) + g``, i.e. the noise prediction
    ``eps_hat - sqrt(1 - alpha_bar_t) * g``::

        sqrt(ab[t-1]) * (1 - ab[t]) / sqrt(ab[t]) - c2 * sqrt(1 - ab[t])
    """
    co = ddim_coefficients(s, t, eta)
    if mode == "alg1":
        return co.sqrt_alpha_bar
    if mode == "posterior":
        a, a_prev = s.ab(t), s.ab(t - 1)
        return float(np.sqrt(a_prev) * (1.0 - a) / np.sqrt(a)
                     - co.c2 * np.sqrt(1.0 - a))
    raise ValueError(f"unknown guidance weight mode {mode!r}")
