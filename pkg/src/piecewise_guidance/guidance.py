"""Piecewise measurement guidance ``grad_x log p_t(y | x_t)``.

Below the threshold ``T0`` the diffusion noise seen through ``C`` is
treated as negligible, giving a closed-form Gaussian likelihood with no
model calls.  At and above ``T0`` the likelihood is built around the
one-step denoiser and needs a vector-Jacobian product through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .operators import LinearOperator, Measurement, solve_gram
from .priors import ScoreModel
from .schedule import NoiseSchedule

__all__ = [
    "GuidanceConfig",
    "GuidanceResult",
    "parse_rt_schedule",
    "rt_one_minus_alphabar",
    "guidance_low",
    "guidance_high",
    "piecewise_guidance",
    "expected_vjp_calls",
]

LOW = "low"
HIGH = "high"


def rt_one_minus_alphabar(s: NoiseSchedule, t: int) -> float:
    """Default ``r_t = sqrt(1 - alpha_bar_t)``."""
    return float(np.sqrt(1.0 - s.ab(t)))


@lru_cache(maxsize=32)
def parse_rt_schedule(spec: str) -> Callable[[NoiseSchedule, int], float]:
    """Turn ``"one-minus-alphabar"`` or ``"constant:<v>"`` into a callable."""
    spec = spec.strip()
    if spec == "one-minus-alphabar":
        return rt_one_minus_alphabar
    if spec.startswith("constant:"):
        value = float(spec.split(":", 1)[1])
        if value < 0.0:
            raise ValueError(f"constant r_t must be non-negative, got {value}")
        return lambda s, t: value
    raise ValueError(f"unknown r_t schedule {spec!r}")


@dataclass(frozen=True)
class GuidanceConfig:
    """Parameters of the piecewise guidance and the DDIM update.

    ``T0 = 0`` always uses the Jacobian branch; ``T0 = T + 1`` never does.
    ``sigma_z`` defaults to the measurement's own noise level;
    ``sigma_z_floor`` lower-bounds it (set the floor to 0 to make noiseless
    problems fail loudly in the low branch).
    ``weight`` selects the multiplier of ``g`` in the reverse update, see
    :func:`piecewise_guidance.schedule.guidance_step_weight`.
    """

    T0: int = 0
    k1: float = 1.0
    k2: float = 1.0
    eta: float = 1.0
    sigma_z: float | None = None
    rt_schedule: str = "one-minus-alphabar"
    sigma_z_floor: float = 1e-3
    weight: str = "posterior"

    def __post_init__(self):
        if int(self.T0) != self.T0 or self.T0 < 0:
            raise ValueError(f"T0 must be a non-negative integer, got {self.T0}")
        if self.k1 < 0.0 or self.k2 < 0.0:
            raise ValueError("gains k1, k2 must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if (self.sigma_z is not None and self.sigma_z < 0.0) or self.sigma_z_floor < 0.0:
            raise ValueError("sigma_z and sigma_z_floor must be non-negative")
        if self.weight not in ("posterior", "alg1"):
            raise ValueError(f"unknown guidance weight {self.weight!r}")
        parse_rt_schedule(self.rt_schedule)

    def effective_sigma_z(self, meas: Measurement) -> float:
        sz = meas.sigma_z if self.sigma_z is None else self.sigma_z
        return max(sz, self.sigma_z_floor)

    def r_t(self, s: NoiseSchedule, t: int) -> float:
        return parse_rt_schedule(self.rt_schedule)(s, t)

    def check_schedule(self, s: NoiseSchedule) -> None:
        if self.T0 > s.T + 1:
            raise ValueError(f"T0={self.T0} exceeds T+1={s.T + 1}")


@dataclass(frozen=True)
class GuidanceResult:
    g: np.ndarray
    branch: str


def guidance_low(op: LinearOperator, meas: Measurement, s: NoiseSchedule, t: int, x_t):
    """``C^T (y - C x_t / sqrt(ab)) / (sigma_z^2 sqrt(ab))``; touches no model."""
    if meas.sigma_z <= 0.0:
        raise ZeroDivisionError(
            "noiseless low-branch unsupported: sigma_z must be > 0 (set sigma_z_floor)")
    sa = np.sqrt(s.ab(t))
    resid = meas.y - op.apply(x_t) / sa
    return op.apply_transpose(resid) / (meas.sigma_z ** 2 * sa)


def guidance_high(op: LinearOperator, meas: Measurement, s: NoiseSchedule, t: int, x_t,
                  model: ScoreModel, r_t: float):
    """``J^T C^T (r_t^2 C C^T + sigma_z^2 I)^{-1} (y - C x0_hat)`` with ``J = d x0_hat / d x_t``.

    One ``denoise`` and exactly one ``vjp_denoise`` call.
    """
    x0_hat = model.denoise(x_t, t)
    resid = meas.y - op.apply(x0_hat)
    back = op.apply_transpose(solve_gram(op, r_t, meas.sigma_z, resid))
    return model.vjp_denoise(x_t, t, back)


def piecewise_guidance(cfg: GuidanceConfig, op: LinearOperator, meas: Measurement,
                       s: NoiseSchedule, t: int, x_t, model: ScoreModel) -> GuidanceResult:
    t = s.check_t(t)
    sz = cfg.effective_sigma_z(meas)
    m = meas if sz == meas.sigma_z else Measurement(meas.y, sz)
    if t < cfg.T0:
        return GuidanceResult(cfg.k1 * guidance_low(op, m, s, t, x_t), LOW)
    return GuidanceResult(
        cfg.k2 * guidance_high(op, m, s, t, x_t, model, cfg.r_t(s, t)), HIGH)


def expected_vjp_calls(T: int, T0: int) -> int:
    """Number of timesteps ``t in 1..T`` with ``t >= T0``."""
    return int(min(max(T - max(T0, 1) + 1, 0), T))
