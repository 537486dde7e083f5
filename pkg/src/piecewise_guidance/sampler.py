"""Guided DDIM reverse loop (pure noise -> reconstruction).

Every chain owns a Philox generator keyed on its seed.  The stream is
consumed as one ``standard_normal(n)`` draw for the initial state followed
by one draw per timestep, so a chain's trajectory does not depend on what
else runs alongside it.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .guidance import HIGH, LOW, GuidanceConfig, piecewise_guidance
from .operators import LinearOperator, Measurement
from .priors import ScoreModel
from .schedule import NoiseSchedule, ddim_coefficients, guidance_step_weight

__all__ = [
    "SamplerOptions",
    "StepLog",
    "RunRecord",
    "RunSpec",
    "NonFiniteStateError",
    "make_rng",
    "sample_posterior",
    "sample_posterior_batch",
    "sample_unconditional",
    "run_batch",
]

log = logging.getLogger(__name__)


class NonFiniteStateError(FloatingPointError):
    def __init__(self, t: int, branch: str, guidance_norm: float):
        self.t, self.branch, self.guidance_norm = t, branch, guidance_norm
        super().__init__(
            f"non-finite sampler state at t={t} (branch={branch}, |g|={guidance_norm:.6e})")


@dataclass(frozen=True)
class SamplerOptions:
    snapshot_every: int = 0
    record_guidance_norms: bool = True

    def __post_init__(self):
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be >= 0")


@dataclass
class StepLog:
    t: int
    branch: str
    guidance_norm: float
    seconds: float


@dataclass
class RunRecord:
    """Outcome of one posterior run.

    ``denoise_calls`` counts every model forward pass (one ``predict_noise``
    per step plus one ``denoise`` per Jacobian-branch step); ``vjp_calls``
    counts Jacobian-branch steps.
    """

    seed: int
    x_final: np.ndarray | None = None
    steps: list[StepLog] = field(default_factory=list)
    vjp_calls: int = 0
    denoise_calls: int = 0
    wall_clock_total: float = 0.0
    wall_clock_per_branch: dict = field(default_factory=lambda: {LOW: 0.0, HIGH: 0.0})
    snapshots: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _step_table(s: NoiseSchedule, eta: float, weight: str) -> list:
    """Per-timestep ``(sqrt ab, sqrt(1-ab), sqrt ab_prev, c1, c2, guidance weight)``."""
    table = [None]
    for t in range(1, s.T + 1):
        co = ddim_coefficients(s, t, eta)
        table.append((co.sqrt_alpha_bar, co.sqrt_one_minus_alpha_bar, float(np.sqrt(s.ab(t - 1))),
                      co.c1, co.c2, guidance_step_weight(s, t, eta, weight)))
    return table


def _reverse_loop(s: NoiseSchedule, model: ScoreModel, rngs: Sequence[np.random.Generator],
                  eta: float, guide: Callable | None, weight: str,
                  x_init=None, on_step: Callable | None = None, table=None) -> np.ndarray:
    """Run ``len(rngs)`` chains in lock-step; returns the final states ``(B, n)``.

    ``guide(t, x, x_hat)`` returns ``(g, branch)`` or ``None`` for no guidance.
    ``on_step(t, branch, g, x_new, seconds)`` observes each step.
    """
    n = model.dim
    draws = [rng.standard_normal(n) for rng in rngs]
    x = np.stack(draws) if x_init is None else np.array(x_init, dtype=np.float64).reshape(len(rngs), n)
    table = table or _step_table(s, eta, weight)
    for t in range(s.T, 0, -1):
        tic = time.perf_counter()
        sa, s1a, sa_prev, c1, c2, gw = table[t]
        eps_hat = model.predict_noise(x, t)
        x_hat = (x - s1a * eps_hat) / sa
        noise = np.stack([rng.standard_normal(n) for rng in rngs])
        x_new = sa_prev * x_hat + c1 * noise + c2 * eps_hat
        g, branch = None, "none"
        if guide is not None:
            g, branch = guide(t, x, x_hat)
            x_new = x_new + gw * g
        if not np.all(np.isfinite(x_new)):
            gnorm = float(np.linalg.norm(g)) if g is not None else 0.0
            raise NonFiniteStateError(t, branch, gnorm)
        x = x_new
        if on_step is not None:
            on_step(t, branch, g, x, time.perf_counter() - tic)
    return x


def _check_dims(op: LinearOperator, meas: Measurement, model: ScoreModel):
    if op.n != model.dim:
        raise ValueError(f"operator acts on R^{op.n} but the model is on R^{model.dim}")
    if meas.y.shape != (op.m,):
        raise ValueError(f"measurement has shape {meas.y.shape}, operator outputs {op.m}")


def sample_posterior(cfg: GuidanceConfig, op: LinearOperator, meas: Measurement,
                     s: NoiseSchedule, model: ScoreModel, seed: int,
                     opts: SamplerOptions = SamplerOptions()) -> RunRecord:
    """Draw one posterior sample and keep a per-step log of the run."""
    _check_dims(op, meas, model)
    cfg.check_schedule(s)
    rec = RunRecord(seed=int(seed))

    def guide(t, x, x_hat):
        res = piecewise_guidance(cfg, op, meas, s, t, x, model)
        if res.branch == HIGH:
            rec.vjp_calls += 1
            rec.denoise_calls += 1
        return res.g, res.branch

    table = _step_table(s, cfg.eta, cfg.weight)
    rngs = [make_rng(seed)]
    # contiguous intervals, so the per-branch times partition the total
    clock = [time.perf_counter()]

    def on_step(t, branch, g, x, _):
        gnorm = float(np.linalg.norm(g)) if opts.record_guidance_norms else float("nan")
        rec.denoise_calls += 1  # the predict_noise forward pass
        if opts.snapshot_every and (t % opts.snapshot_every == 0 or t == 1):
            rec.snapshots[t] = x[0].copy()
        now = time.perf_counter()
        seconds = now - clock[0]
        clock[0] = now
        rec.steps.append(StepLog(t, branch, gnorm, seconds))
        rec.wall_clock_per_branch[branch] += seconds

    start = clock[0]
    x = _reverse_loop(s, model, rngs, cfg.eta, guide, cfg.weight, on_step=on_step, table=table)
    rec.wall_clock_total = time.perf_counter() - start
    rec.x_final = x[0]
    return rec


def sample_posterior_batch(cfg: GuidanceConfig, op: LinearOperator, meas: Measurement,
                           s: NoiseSchedule, model: ScoreModel, seeds: Sequence[int]) -> np.ndarray:
    """Vectorised posterior draws, one row per seed (no per-step log).

    Each row follows the same random stream as :func:`sample_posterior` with
    that seed; rows can differ from single runs in the last bits because the
    batched linear algebra rounds differently.
    """
    _check_dims(op, meas, model)
    cfg.check_schedule(s)

    def guide(t, x, x_hat):
        res = piecewise_guidance(cfg, op, meas, s, t, x, model)
        return res.g, res.branch

    return _reverse_loop(s, model, [make_rng(sd) for sd in seeds], cfg.eta, guide, cfg.weight)


def sample_unconditional(s: NoiseSchedule, model: ScoreModel, seed, eta: float = 1.0,
                         x_T=None) -> np.ndarray:
    """Plain DDIM sample from the model's prior.

    ``seed`` may be a single integer (returns a vector) or a sequence
    (returns one row per seed).
    """
    single = np.ndim(seed) == 0
    seeds = [seed] if single else list(seed)
    x = _reverse_loop(s, model, [make_rng(sd) for sd in seeds], eta, None, "posterior",
                      x_init=x_T)
    return x[0] if single else x


@dataclass
class RunSpec:
    """Everything one independent posterior run needs."""

    cfg: GuidanceConfig
    op: LinearOperator
    meas: Measurement
    schedule: NoiseSchedule
    model: ScoreModel
    seed: int
    opts: SamplerOptions = field(default_factory=SamplerOptions)


def _run_one(spec: RunSpec) -> RunRecord:
    try:
        return sample_posterior(spec.cfg, spec.op, spec.meas, spec.schedule, spec.model,
                                spec.seed, spec.opts)
    except Exception as exc:  # reported per run, never aborts the batch
        log.warning("run with seed %s failed: %s", spec.seed, exc)
        return RunRecord(seed=int(spec.seed), error=f"{type(exc).__name__}: {exc}")


def run_batch(specs: Sequence[RunSpec], parallelism: int = 1) -> list[RunRecord]:
    """Run independent posterior samples; results keep the input order."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if parallelism == 1 or len(specs) <= 1:
        return [_run_one(sp) for sp in specs]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(_run_one, specs))
