"""Experiment configuration and the problem x T0 x seed grid.

Configs are YAML documents.  See ``README.md`` for the full schema; a
minimal one looks like::

    schedule: {T: 1000, beta_start: 1.0e-4, beta_end: 0.02}
    prior: {kind: smooth-image, components: 3, seed: 0}
    problems:
      - {name: random30, kind: inpaint-random, height: 16, width: 16,
         drop_fraction: 0.3, sigma_z: 0.1}
    guidance: {T0: [0, 200], k1: 1.0, k2: 1.0, eta: 1.0}
    seeds: [0, 1, 2]
    output: runs/demo
"""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .guidance import GuidanceConfig, expected_vjp_calls
from .imageio import read_image, read_vector, write_image, write_vector
from .metrics import SSIM_WINDOW, ImageBuffer, psnr, ssim
from .operators import (LinearOperator, Measurement, load_dense_matrix, make_avgpool_sr,
                        make_center_mask, make_dense, make_random_mask)
from .priors import GmmPrior, GmmScoreModel, load_gmm
from .sampler import RunRecord, RunSpec, SamplerOptions, make_rng, run_batch
from .schedule import NoiseSchedule, build_linear_schedule

__all__ = [
    "ConfigError",
    "ProblemSpec",
    "ExperimentConfig",
    "Problem",
    "GridResult",
    "load_config",
    "parse_config",
    "smooth_image_gmm",
    "build_prior",
    "build_problem",
    "run_grid",
    "summarize_t0",
    "SUMMARY_COLUMNS",
    "CURVE_COLUMNS",
    "STEP_COLUMNS",
    "write_csv",
    "fmt",
]

log = logging.getLogger(__name__)

PROBLEM_KINDS = ("inpaint-center", "inpaint-random", "sr", "dense")
SUMMARY_COLUMNS = ("problem", "T0", "seed", "psnr", "ssim", "wall_clock_s",
                   "vjp_calls", "denoise_calls", "error")
CURVE_COLUMNS = ("problem", "T0", "n_runs", "psnr_mean", "psnr_se", "ssim_mean", "ssim_se",
                 "wall_clock_mean", "wall_clock_se", "vjp_calls")
STEP_COLUMNS = ("row_type", "t", "branch", "guidance_norm", "seconds",
                "vjp_calls", "denoise_calls")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    kind: str
    height: int = 0
    width: int = 0
    channels: int = 1
    sigma_z: float = 0.05
    box: tuple[int, int] = (0, 0)
    drop_fraction: float = 0.3
    mask_seed: int = 0
    factor: int = 4
    matrix: Any = None
    image: str | None = None
    image_seed: int = 0
    noise_seed: int = 0

    @property
    def n(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class ExperimentConfig:
    problems: tuple[ProblemSpec, ...]
    prior: dict
    schedule: dict
    guidance: GuidanceConfig
    t0_values: tuple[int, ...]
    seeds: tuple[int, ...]
    output: Path
    sampler: SamplerOptions = field(default_factory=SamplerOptions)
    validation: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def make_schedule(self) -> NoiseSchedule:
        return build_linear_schedule(**self.schedule)


def _get(d, key, kind, default=None, required=False):
    if key not in d or d[key] is None:
        if required:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return kind(d[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {d[key]!r}") from exc


def _problem(d: dict, idx: int) -> ProblemSpec:
    if not isinstance(d, dict):
        raise ConfigError(f"problem #{idx} must be a mapping")
    kind = _get(d, "kind", str, required=True)
    if kind not in PROBLEM_KINDS:
        raise ConfigError(f"unknown problem kind {kind!r}; expected one of {PROBLEM_KINDS}")
    box = d.get("box", (0, 0))
    if isinstance(box, int):
        box = (box, box)
    spec = ProblemSpec(
        name=_get(d, "name", str, kind),
        kind=kind,
        height=_get(d, "height", int, 0),
        width=_get(d, "width", int, 0),
        channels=_get(d, "channels", int, 1),
        sigma_z=_get(d, "sigma_z", float, 0.05),
        box=tuple(int(b) for b in box),
        drop_fraction=_get(d, "drop_fraction", float, 0.3),
        mask_seed=_get(d, "mask_seed", int, 0),
        factor=_get(d, "factor", int, 4),
        matrix=d.get("matrix"),
        image=_get(d, "image", str),
        image_seed=_get(d, "image_seed", int, 0),
        noise_seed=_get(d, "noise_seed", int, 0),
    )
    if spec.sigma_z < 0:
        raise ConfigError(f"problem {spec.name!r}: sigma_z must be non-negative")
    if kind != "dense" and spec.n <= 0:
        raise ConfigError(f"problem {spec.name!r}: height and width are required")
    if kind == "dense" and spec.matrix is None:
        raise ConfigError(f"problem {spec.name!r}: dense problems need 'matrix'")
    return spec


def parse_config(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    problems = raw.get("problems")
    if problems is None and "problem" in raw:
        problems = [raw["problem"]]
    if not problems:
        problems = []
    problems = tuple(_problem(p, i) for i, p in enumerate(problems))
    names = [p.name for p in problems]
    if len(set(names)) != len(names):
        raise ConfigError(f"problem names must be unique, got {names}")

    sched = dict(raw.get("schedule") or {})
    sched_kw = {"T": _get(sched, "T", int, 1000),
                "beta_start": _get(sched, "beta_start", float, 1e-4),
                "beta_end": _get(sched, "beta_end", float, 0.02)}
    try:
        build_linear_schedule(**sched_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    g = dict(raw.get("guidance") or {})
    t0 = g.get("T0", 0)
    t0_values = tuple(int(v) for v in (t0 if isinstance(t0, (list, tuple)) else [t0]))
    for v in t0_values:
        if not 0 <= v <= sched_kw["T"] + 1:
            raise ConfigError(f"T0={v} outside [0, T+1]")
    try:
        guidance = GuidanceConfig(
            T0=t0_values[0],
            k1=_get(g, "k1", float, 1.0),
            k2=_get(g, "k2", float, 1.0),
            eta=_get(g, "eta", float, 1.0),
            sigma_z=_get(g, "sigma_z", float, None),
            rt_schedule=_get(g, "rt_schedule", str, "one-minus-alphabar"),
            sigma_z_floor=_get(g, "sigma_z_floor", float, 1e-3),
            weight=_get(g, "weight", str, "posterior"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    sampler = dict(raw.get("sampler") or {})
    try:
        opts = SamplerOptions(snapshot_every=_get(sampler, "snapshot_every", int, 0),
                              record_guidance_norms=bool(sampler.get("record_guidance_norms", True)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    prior = dict(raw.get("prior") or {"kind": "smooth-image"})
    return ExperimentConfig(
        problems=problems,
        prior=prior,
        schedule=sched_kw,
        guidance=guidance,
        t0_values=t0_values,
        seeds=tuple(int(s) for s in seeds),
        output=Path(raw.get("output", "runs")),
        sampler=opts,
        validation=dict(raw.get("validation") or {}),
        base_dir=base_dir,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return parse_config(raw or {}, base_dir=path.parent)


def smooth_image_gmm(height: int, width: int, channels: int = 1, components: int = 3,
                     seed: int = 0, length_scale: float = 3.0, amplitude: float = 0.15,
                     mean_spread: float = 0.3, jitter: float = 1e-3) -> GmmPrior:
    """Mixture of smooth Gaussian random fields on an image grid.

    Every component has a squared-exponential pixel covariance
    ``amplitude^2 exp(-d^2 / (2 length_scale^2)) + jitter`` (independent
    across channels) and a mean that is itself a normalised smooth field
    centred on 0.5.  Weights are equal.
    """
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    pts = np.column_stack([yy.ravel(), xx.ravel()]).astype(np.float64)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    K = np.exp(-d2 / (2.0 * length_scale ** 2))
    eye_c = np.eye(channels)
    cov = amplitude ** 2 * np.kron(K, eye_c) + jitter * np.eye(K.shape[0] * channels)
    rng = np.random.Generator(np.random.Philox(seed))
    L = np.linalg.cholesky(np.kron(K, eye_c) + 1e-8 * np.eye(cov.shape[0]))
    means = []
    for _ in range(components):
        f = L @ rng.standard_normal(cov.shape[0])
        means.append(0.5 + mean_spread * f / np.max(np.abs(f)))
    covs = np.repeat(cov[None], components, axis=0)
    return GmmPrior(np.full(components, 1.0 / components), np.array(means), covs)


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def build_prior(spec: dict, problem: ProblemSpec, dim: int, base_dir: Path) -> GmmPrior:
    kind = spec.get("kind", "smooth-image")
    if kind == "smooth-image":
        if problem.kind == "dense":
            raise ConfigError("smooth-image prior needs an image problem")
        return smooth_image_gmm(problem.height, problem.width, problem.channels,
                                components=int(spec.get("components", 3)),
                                seed=int(spec.get("seed", 0)),
                                length_scale=float(spec.get("length_scale", 3.0)),
                                amplitude=float(spec.get("amplitude", 0.15)),
                                mean_spread=float(spec.get("mean_spread", 0.3)),
                                jitter=float(spec.get("jitter", 1e-3)))
    if kind == "gaussian":
        mean = np.broadcast_to(np.asarray(spec.get("mean", 0.0), dtype=np.float64), (dim,))
        cov = spec.get("cov", 1.0)
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(dim)
        return GmmPrior.gaussian(mean, cov)
    if kind == "gmm":
        if "file" in spec:
            prior = load_gmm(_resolve(base_dir, spec["file"]))
        else:
            w = np.asarray(spec["weights"], dtype=np.float64)
            covs = [np.asarray(c, dtype=np.float64) for c in spec["covariances"]]
            covs = np.array([c * np.eye(dim) if c.ndim == 0 else c for c in covs])
            prior = GmmPrior(w / w.sum(), np.asarray(spec["means"], dtype=np.float64), covs)
        if prior.dim != dim:
            raise ConfigError(f"prior dimension {prior.dim} does not match problem dimension {dim}")
        return prior
    raise ConfigError(f"unknown prior kind {kind!r}")


def build_operator(p: ProblemSpec, base_dir: Path) -> LinearOperator:
    h, w, c = p.height, p.width, p.channels
    if p.kind == "inpaint-center":
        return make_center_mask(h, w, c, *p.box)
    if p.kind == "inpaint-random":
        return make_random_mask(h, w, c, p.drop_fraction, p.mask_seed)
    if p.kind == "sr":
        return make_avgpool_sr(h, w, c, p.factor)
    if isinstance(p.matrix, str):
        return load_dense_matrix(_resolve(base_dir, p.matrix))
    return make_dense(p.matrix)


@dataclass
class Problem:
    spec: ProblemSpec
    schedule: NoiseSchedule
    prior: GmmPrior
    model: GmmScoreModel
    op: LinearOperator
    x_true: np.ndarray
    meas: Measurement

    @property
    def image_shape(self):
        s = self.spec
        return (s.height, s.width, s.channels) if s.kind != "dense" else None


def build_problem(cfg: ExperimentConfig, spec: ProblemSpec,
                  schedule: NoiseSchedule | None = None) -> Problem:
    schedule = schedule or cfg.make_schedule()
    try:
        op = build_operator(spec, cfg.base_dir)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"problem {spec.name!r}: {exc}") from exc
    dim = op.n
    try:
        prior = build_prior(cfg.prior, spec, dim, cfg.base_dir)
    except (KeyError, OSError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"prior: {exc}") from exc
    if spec.image is not None:
        try:
            img = read_image(_resolve(cfg.base_dir, spec.image))
        except OSError as exc:
            raise ConfigError(f"problem {spec.name!r}: cannot read image: {exc}") from exc
        if img.shape != (spec.height, spec.width, spec.channels):
            raise ConfigError(f"image {spec.image} has shape {img.shape}, expected "
                              f"{(spec.height, spec.width, spec.channels)}")
        x_true = img.data.reshape(-1)
    else:
        x_true = prior.sample(make_rng(spec.image_seed), 1)[0]
        if spec.kind != "dense":
            x_true = np.clip(x_true, 0.0, 1.0)
    noise = make_rng(spec.noise_seed).standard_normal(op.m)
    y = op.apply(x_true) + spec.sigma_z * noise
    return Problem(spec, schedule, prior, GmmScoreModel(prior, schedule), op, x_true,
                   Measurement(y, spec.sigma_z))


def fmt(v) -> str:
    """CSV cell: integers verbatim, reals in full-precision scientific notation."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17e}"
    return str(v)


def write_csv(path, columns, rows) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])
    os.replace(tmp, path)


def _atomic(path: Path, writer, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.stem}.tmp{path.suffix}")
    writer(tmp, payload)
    os.replace(tmp, path)


def _metrics(problem: Problem, x) -> tuple[float, float]:
    shape = problem.image_shape
    if shape is None:
        return psnr(problem.x_true.reshape(-1, 1), np.asarray(x).reshape(-1, 1)), math.nan
    a = ImageBuffer.from_vector(problem.x_true, *shape)
    b = ImageBuffer.from_vector(x, *shape)
    q = psnr(a, b)
    s = ssim(a, b) if min(shape[:2]) >= SSIM_WINDOW else math.nan
    return q, s


def _step_rows(rec: RunRecord):
    rows = [{"row_type": "step", "t": st.t, "branch": st.branch,
             "guidance_norm": st.guidance_norm, "seconds": st.seconds} for st in rec.steps]
    rows.append({"row_type": "summary", "seconds": rec.wall_clock_total,
                 "vjp_calls": rec.vjp_calls, "denoise_calls": rec.denoise_calls,
                 "branch": f"low={rec.wall_clock_per_branch.get('low', 0.0):.6e};"
                           f"high={rec.wall_clock_per_branch.get('high', 0.0):.6e}"})
    return rows


@dataclass
class GridResult:
    rows: list[dict]
    records: list[RunRecord]

    @property
    def ok(self) -> bool:
        return all(r["error"] is None for r in self.rows)


def run_grid(cfg: ExperimentConfig, jobs: int = 1, out: Path | None = None,
             write_outputs: bool = True) -> GridResult:
    """Run every (problem, T0, seed) cell and collect one summary row per run."""
    out = Path(out) if out is not None else cfg.output
    schedule = cfg.make_schedule()
    problems = [build_problem(cfg, p, schedule) for p in cfg.problems]
    cells, specs = [], []
    for prob in problems:
        for t0 in cfg.t0_values:
            gcfg = replace(cfg.guidance, T0=t0)
            for seed in cfg.seeds:
                cells.append((prob, t0, seed))
                specs.append(RunSpec(gcfg, prob.op, prob.meas, schedule, prob.model, seed,
                                     cfg.sampler))
    log.info("running %d cells with %d job(s)", len(specs), jobs)
    records = run_batch(specs, parallelism=jobs)
    rows = []
    for (prob, t0, seed), rec in zip(cells, records):
        row = {"problem": prob.spec.name, "T0": t0, "seed": seed, "psnr": math.nan,
               "ssim": math.nan, "wall_clock_s": rec.wall_clock_total,
               "vjp_calls": rec.vjp_calls, "denoise_calls": rec.denoise_calls,
               "error": rec.error}
        if rec.ok:
            row["psnr"], row["ssim"] = _metrics(prob, rec.x_final)
            if write_outputs:
                stem = f"{prob.spec.name}_T0-{t0}_seed-{seed}"
                _atomic(out / "recon" / f"{stem}.txt", write_vector, rec.x_final)
                shape = prob.image_shape
                if shape is not None and shape[2] in (1, 3):
                    ext = ".pgm" if shape[2] == 1 else ".ppm"
                    _atomic(out / "recon" / f"{stem}{ext}", write_image,
                            ImageBuffer.from_vector(rec.x_final, *shape))
                write_csv(out / "runs" / f"{stem}_steps.csv", STEP_COLUMNS, _step_rows(rec))
                for t, snap in sorted(rec.snapshots.items()):
                    _atomic(out / "snapshots" / f"{stem}_t-{t}.txt", write_vector, snap)
            expect = expected_vjp_calls(schedule.T, t0)
            if rec.vjp_calls != expect:
                row["error"] = f"vjp accounting mismatch: {rec.vjp_calls} != {expect}"
        rows.append(row)
    if write_outputs:
        for prob in problems:
            _atomic(out / "truth" / f"{prob.spec.name}.txt", write_vector, prob.x_true)
        write_csv(out / "summary.csv", SUMMARY_COLUMNS, rows)
    return GridResult(rows, records)


def _mean_se(vals):
    vals = np.asarray([v for v in vals if np.isfinite(v)], dtype=np.float64)
    if vals.size == 0:
        return math.nan, math.nan
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else math.nan
    return float(vals.mean()), se


def summarize_t0(rows: list[dict]) -> list[dict]:
    """Per (problem, T0) means and standard errors over successful seeds."""
    groups: dict = {}
    for r in rows:
        if r["error"] is None:
            groups.setdefault((r["problem"], r["T0"]), []).append(r)
    out = []
    for (name, t0), rs in groups.items():
        pm, pse = _mean_se([r["psnr"] for r in rs])
        sm, sse = _mean_se([r["ssim"] for r in rs])
        wm, wse = _mean_se([r["wall_clock_s"] for r in rs])
        out.append({"problem": name, "T0": t0, "n_runs": len(rs), "psnr_mean": pm,
                    "psnr_se": pse, "ssim_mean": sm, "ssim_se": sse, "wall_clock_mean": wm,
                    "wall_clock_se": wse, "vjp_calls": rs[0]["vjp_calls"]})
    return out
