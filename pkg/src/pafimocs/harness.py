"""Simulation protocol, metrics, and the Monte Carlo experiment driver.

A simulated sequence starts from motion (0, 0, 1), a uniformly drawn initial
support, and zero coefficients; the motion walks every frame, the support
moves through its add/remove kernel only on frames divisible by
``support_change_period``, and the coefficients walk on the current support.
Frames are rendered with uniform clutter outside the mapped template.

The experiment driver runs several tracker configurations over independent
Monte Carlo replications. Seeding is hierarchical and documented: the master
``SeedSequence(cfg.seed)`` spawns one child per run; each run child spawns
``1 + n_filters`` grandchildren, the first feeding sequence generation and
the rest one tracker each (inside a tracker the per-particle rule of
``ParticleSet.initialize`` applies). Aggregation is keyed by run index, so
results are identical however runs are scheduled.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import fileio
from .dictionary import (
    Dictionary,
    SupportTrace,
    TemplatePatch,
    build_dictionary,
    ml_coeff_fit,
    support_trace,
)
from .filters import FilterConfig, TrackResult, run_tracker
from .models import FullState, ModelParams, MotionState, SupportSet, sample_coeff_transition, sample_motion_transition, sample_support_transition
from .observation import Frame, NoiseModel, render_frame

__all__ = [
    "FilterSpec",
    "SimConfig",
    "GroundTruth",
    "MetricSeries",
    "ExperimentResult",
    "default_params",
    "default_filters",
    "make_template",
    "generate_sequence",
    "nmse",
    "nmse_components",
    "location_error",
    "resolve_filter_config",
    "run_experiment",
    "analyze_support",
    "write_membership_csv",
]

CSV_SCHEMA = "pafimocs-csv-v1"

# (gamma, beta) defaults per regime for the sparse mode-tracking variants
_REGIME_MULTIPLIERS = {
    ("simulation", "pafimocs"): (0.7, 0.4),
    ("simulation", "pafimocs-ssc"): (0.5, 0.4),
    ("real-video", "pafimocs"): (0.7, 1.0),
    ("real-video", "pafimocs-ssc"): (0.5, 1.0),
}


def default_params() -> ModelParams:
    """Simulation-regime model constants."""
    return ModelParams(
        n_lambda=41,
        s_expected=5,
        p_a=0.03,
        p_r=0.216,
        sigma_l_sq=0.01,
        sigma_u=(0.5, 0.5, 0.0),
        sigma_o_sq=1.0,
    )


@dataclass(frozen=True)
class FilterSpec:
    """One tracker entry of an experiment; None multipliers take regime defaults."""

    label: str
    variant: str
    d: int
    gamma: float | None = None
    beta: float | None = None


def default_filters(d: int = 20) -> tuple:
    return (
        FilterSpec("pafimocs", "pafimocs", d),
        FilterSpec("pafimocs-ssc", "pafimocs-ssc", d),
        FilterSpec("pf-mt-3", "pf-mt", 3),
        FilterSpec(f"pf-mt-{d}", "pf-mt", d),
        FilterSpec("pf-gordon-3", "pf-gordon", 3),
        FilterSpec(f"pf-gordon-{d}", "pf-gordon", d),
        FilterSpec("aux-pf-3", "aux-pf", 3),
        FilterSpec(f"aux-pf-{d}", "aux-pf", d),
    )


@dataclass
class SimConfig:
    """Everything one experiment needs; ``n_frames`` counts tracked steps
    after the known initial frame."""

    seed: int = 0
    n_frames: int = 50
    frame_height: int = 96
    frame_width: int = 96
    template_height: int = 32
    template_width: int = 32
    template_pattern: str = "bumps"
    template_seed: int = 0
    d: int = 20
    n_pf: int = 100
    params: ModelParams = field(default_factory=default_params)
    support_change_period: int = 5
    initial_support_size: int = 5
    filters: tuple = field(default_factory=default_filters)
    n_monte_carlo: int = 20
    regime: str = "simulation"
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.support_change_period < 1:
            raise ValueError("support_change_period must be >= 1")
        if not 0 <= self.initial_support_size <= self.params.n_lambda:
            raise ValueError("initial_support_size must lie in [0, n_lambda]")
        if (
            self.template_height > self.frame_height
            or self.template_width > self.frame_width
        ):
            raise ValueError("template must fit inside the frame")
        if self.params.n_lambda != 2 * self.d + 1:
            raise ValueError("params.n_lambda must equal 2 * d + 1")
        if self.regime not in ("simulation", "real-video"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.n_monte_carlo < 1 or self.n_jobs < 1:
            raise ValueError("n_monte_carlo and n_jobs must be >= 1")
        if self.template_pattern == "constant" and self.d > 0:
            warnings.warn(
                "constant template with d > 0 risks an ill-conditioned dictionary",
                RuntimeWarning,
            )


@dataclass(eq=False)
class GroundTruth:
    states: list
    frames: list
    template: TemplatePatch


def make_template(pattern: str, height: int, width: int, seed: int) -> TemplatePatch:
    """Deterministic synthetic template at origin (0, 0).

    ``bumps`` (the default pattern) is two off-center Gaussian bumps plus a
    linear ramp, rescaled to the pixel range [40, 220]; ``constant`` is a
    flat mid-gray patch.
    """
    if height < 4 or width < 4:
        raise ValueError("template must be at least 4 x 4")
    if pattern == "constant":
        return TemplatePatch.from_image(np.full((height, width), 128.0))
    if pattern != "bumps":
        raise ValueError(f"unknown template pattern {pattern!r}")
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )

    def bump(center_i, center_j, width_n, amp):
        return amp * np.exp(
            -((ii - center_i) ** 2 + (jj - center_j) ** 2) / (2.0 * width_n**2)
        )

    jit = rng.uniform(-0.05, 0.05, size=6)
    raw = (
        bump(0.35 + jit[0], 0.30 + jit[1], 0.16 * (1.0 + jit[4]), 1.0)
        + bump(0.62 + jit[2], 0.70 + jit[3], 0.22 * (1.0 + jit[5]), 0.8)
        + 0.45 * (0.6 * ii + 0.4 * jj)
    )
    low, high = float(np.min(raw)), float(np.max(raw))
    image = 40.0 + 180.0 * (raw - low) / (high - low)
    return TemplatePatch.from_image(image)


def _anchored_template(cfg: SimConfig) -> TemplatePatch:
    base = make_template(
        cfg.template_pattern, cfg.template_height, cfg.template_width, cfg.template_seed
    )
    origin_i = (cfg.frame_height - cfg.template_height) // 2
    origin_j = (cfg.frame_width - cfg.template_width) // 2
    return base.with_origin(origin_i, origin_j)


def generate_sequence(cfg: SimConfig, rng) -> GroundTruth:
    """Draw one ground-truth sequence with its rendered frames.

    Per-frame draw order: motion noise, support moves (only on frames
    divisible by the period), coefficient noise, then the frame's clutter
    and pixel noise.
    """
    template = _anchored_template(cfg)
    dictionary = build_dictionary(template, cfg.d)
    params = cfg.params
    noise = NoiseModel(
        kind="pure-gaussian", sigma_sq=params.sigma_o_sq, pixel_max=params.pixel_max
    )
    frame_dims = (cfg.frame_height, cfg.frame_width)

    support = SupportSet.from_indices(
        rng.choice(params.n_lambda, size=cfg.initial_support_size, replace=False),
        params.n_lambda,
    )
    state = FullState(MotionState(0.0, 0.0, 1.0), support, np.zeros(params.n_lambda))
    states = [state]
    frames = [
        render_frame(state.motion, state.coeffs, template, dictionary, frame_dims, noise, rng)
    ]
    for t in range(1, cfg.n_frames + 1):
        motion = sample_motion_transition(state.motion, params, rng)
        support = (
            sample_support_transition(state.support, params, rng)
            if t % cfg.support_change_period == 0
            else state.support
        )
        coeffs = sample_coeff_transition(state.coeffs, support, params, rng)
        state = FullState(motion, support, coeffs)
        states.append(state)
        frames.append(
            render_frame(motion, coeffs, template, dictionary, frame_dims, noise, rng)
        )
    return GroundTruth(states=states, frames=frames, template=template)


def _truth_arrays(truth: GroundTruth) -> tuple[np.ndarray, np.ndarray]:
    motion = np.stack([s.motion.as_array() for s in truth.states])
    coeffs = np.stack([s.coeffs for s in truth.states])
    return motion, coeffs


def _pad_coeffs(est: np.ndarray, n_lambda: int) -> np.ndarray:
    if est.shape[1] == n_lambda:
        return est
    out = np.zeros((est.shape[0], n_lambda))
    keep = min(n_lambda, est.shape[1])
    out[:, :keep] = est[:, :keep]
    return out


def nmse_components(
    truth: GroundTruth, motion_est: np.ndarray, coeff_est: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame squared error and squared reference mass of one run."""
    t_motion, t_coeffs = _truth_arrays(truth)
    coeff_est = _pad_coeffs(np.asarray(coeff_est, dtype=float), t_coeffs.shape[1])
    motion_est = np.asarray(motion_est, dtype=float)
    if motion_est.shape != t_motion.shape or coeff_est.shape != t_coeffs.shape:
        raise ValueError("estimate arrays do not match the truth length")
    err = np.sum((t_motion - motion_est) ** 2, axis=1) + np.sum(
        (t_coeffs - coeff_est) ** 2, axis=1
    )
    ref = np.sum(t_motion**2, axis=1) + np.sum(t_coeffs**2, axis=1)
    return err, ref


def nmse(truth: GroundTruth, motion_est: np.ndarray, coeff_est: np.ndarray) -> np.ndarray:
    """Per-frame normalized squared error of a single run (NaN where the
    reference mass is zero)."""
    err, ref = nmse_components(truth, motion_est, coeff_est)
    out = np.full(err.shape, np.nan)
    np.divide(err, ref, out=out, where=ref > 0.0)
    return out


def location_error(truth_motion, est_motion) -> np.ndarray:
    """Euclidean distance between true and estimated translations."""
    t = np.atleast_2d(np.asarray(truth_motion, dtype=float))
    e = np.atleast_2d(np.asarray(est_motion, dtype=float))
    if t.shape != e.shape:
        raise ValueError("motion arrays must have matching shapes")
    out = np.hypot(t[:, 0] - e[:, 0], t[:, 1] - e[:, 1])
    return out if out.size > 1 else float(out[0])


def resolve_filter_config(spec: FilterSpec, cfg: SimConfig) -> FilterConfig:
    """Fill a tracker's multipliers from the regime defaults where unset."""
    gamma, beta = _REGIME_MULTIPLIERS.get((cfg.regime, spec.variant), (0.7, 1.0))
    if spec.gamma is not None:
        gamma = spec.gamma
    if spec.beta is not None:
        beta = spec.beta
    return FilterConfig(
        variant=spec.variant, n_pf=cfg.n_pf, d=spec.d, gamma=gamma, beta=beta
    )


@dataclass
class MetricSeries:
    """Aggregated metrics of one tracker across Monte Carlo runs."""

    label: str
    nmse: np.ndarray        # ratio of run-averaged error to run-averaged reference
    le_mean: np.ndarray
    le_stderr: np.ndarray
    err_sq: np.ndarray      # (n_runs, n_frames + 1)
    ref_sq: np.ndarray
    le: np.ndarray
    lost: np.ndarray        # (n_runs,) bool


@dataclass
class ExperimentResult:
    metrics: dict
    n_runs: int
    files: dict


def _run_one(cfg: SimConfig, run_idx: int, run_ss: np.random.SeedSequence) -> dict:
    """One Monte Carlo replication; returns per-filter raw metric rows."""
    children = run_ss.spawn(1 + len(cfg.filters))
    truth = generate_sequence(cfg, np.random.default_rng(children[0]))
    t_motion, _ = _truth_arrays(truth)
    out = {}
    for k, spec in enumerate(cfg.filters):
        fcfg = resolve_filter_config(spec, cfg)
        result = run_tracker(
            truth.frames, truth.template, cfg.params, fcfg, truth.states[0], children[1 + k]
        )
        err, ref = nmse_components(truth, result.motion, result.coeffs)
        le = np.asarray(location_error(t_motion, result.motion)).reshape(-1)
        out[spec.label] = {
            "err_sq": err,
            "ref_sq": ref,
            "le": le,
            "lost": result.lost_at is not None,
        }
    return out


def _spawn_run_seeds(cfg: SimConfig) -> list:
    # runs are seeded by independent spawned sequences of the master seed;
    # the child objects themselves are passed around (their .entropy alone
    # would collapse every run onto the parent seed)
    return np.random.SeedSequence(cfg.seed).spawn(cfg.n_monte_carlo)


def run_experiment(cfg: SimConfig, out_dir) -> ExperimentResult:
    """Run the full Monte Carlo comparison and write the CSV/JSON artifacts.

    Emits ``runs.csv`` (per run, filter, frame), ``aggregate.csv`` (per
    filter, frame), and ``summary.json``. Byte-identical outputs for
    identical (config, seed) regardless of ``n_jobs``.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    run_seeds = _spawn_run_seeds(cfg)
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
            futures = [
                pool.submit(_run_one, cfg, r, run_seeds[r]) for r in range(cfg.n_monte_carlo)
            ]
            run_rows = [f.result() for f in futures]
    else:
        run_rows = [_run_one(cfg, r, run_seeds[r]) for r in range(cfg.n_monte_carlo)]

    n_frames = cfg.n_frames + 1
    metrics = {}
    for spec in cfg.filters:
        err = np.stack([run_rows[r][spec.label]["err_sq"] for r in range(cfg.n_monte_carlo)])
        ref = np.stack([run_rows[r][spec.label]["ref_sq"] for r in range(cfg.n_monte_carlo)])
        le = np.stack([run_rows[r][spec.label]["le"] for r in range(cfg.n_monte_carlo)])
        lost = np.array(
            [run_rows[r][spec.label]["lost"] for r in range(cfg.n_monte_carlo)], dtype=bool
        )
        mean_err = np.mean(err, axis=0)
        mean_ref = np.mean(ref, axis=0)
        agg = np.full(n_frames, np.nan)
        np.divide(mean_err, mean_ref, out=agg, where=mean_ref > 0.0)
        le_mean = np.mean(le, axis=0)
        le_stderr = (
            np.std(le, axis=0, ddof=1) / math.sqrt(cfg.n_monte_carlo)
            if cfg.n_monte_carlo > 1
            else np.zeros(n_frames)
        )
        metrics[spec.label] = MetricSeries(
            label=spec.label,
            nmse=agg,
            le_mean=le_mean,
            le_stderr=le_stderr,
            err_sq=err,
            ref_sq=ref,
            le=le,
            lost=lost,
        )

    files = {
        "runs": os.path.join(out_dir, "runs.csv"),
        "aggregate": os.path.join(out_dir, "aggregate.csv"),
        "summary": os.path.join(out_dir, "summary.json"),
    }
    _write_runs_csv(files["runs"], cfg, run_rows)
    _write_aggregate_csv(files["aggregate"], cfg, metrics)
    _write_summary_json(files["summary"], cfg, metrics)
    return ExperimentResult(metrics=metrics, n_runs=cfg.n_monte_carlo, files=files)


def _write_runs_csv(path, cfg: SimConfig, run_rows) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {CSV_SCHEMA} runs\n")
        fh.write("run,filter,frame,err_sq,ref_sq,loc_err,lost\n")
        for r in range(cfg.n_monte_carlo):
            for spec in cfg.filters:
                rows = run_rows[r][spec.label]
                lost = 1 if rows["lost"] else 0
                for t in range(cfg.n_frames + 1):
                    fh.write(
                        f"{r},{spec.label},{t},{fileio.fmt_float(rows['err_sq'][t])},"
                        f"{fileio.fmt_float(rows['ref_sq'][t])},"
                        f"{fileio.fmt_float(rows['le'][t])},{lost}\n"
                    )


def _write_aggregate_csv(path, cfg: SimConfig, metrics) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {CSV_SCHEMA} aggregate\n")
        fh.write("filter,frame,nmse,le_mean,le_stderr,n_runs\n")
        for spec in cfg.filters:
            series = metrics[spec.label]
            for t in range(cfg.n_frames + 1):
                fh.write(
                    f"{spec.label},{t},{fileio.fmt_float(series.nmse[t])},"
                    f"{fileio.fmt_float(series.le_mean[t])},"
                    f"{fileio.fmt_float(series.le_stderr[t])},{cfg.n_monte_carlo}\n"
                )


def _config_echo(cfg: SimConfig) -> dict:
    echo = {
        "seed": cfg.seed,
        "n_frames": cfg.n_frames,
        "frame_height": cfg.frame_height,
        "frame_width": cfg.frame_width,
        "template_height": cfg.template_height,
        "template_width": cfg.template_width,
        "template_pattern": cfg.template_pattern,
        "template_seed": cfg.template_seed,
        "d": cfg.d,
        "n_pf": cfg.n_pf,
        "support_change_period": cfg.support_change_period,
        "initial_support_size": cfg.initial_support_size,
        "n_monte_carlo": cfg.n_monte_carlo,
        "regime": cfg.regime,
        "params": cfg.params.to_config(),
        "filters": [asdict(spec) for spec in cfg.filters],
    }
    return echo


def _write_summary_json(path, cfg: SimConfig, metrics) -> None:
    summary = {
        "schema": f"{CSV_SCHEMA} summary",
        "config": _config_echo(cfg),
        "filters": {
            label: {
                "final_nmse": float(series.nmse[-1]),
                "final_le_mean": float(series.le_mean[-1]),
                "lost_runs": int(np.sum(series.lost)),
            }
            for label, series in metrics.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def analyze_support(
    source: np.ndarray,
    dictionary: Dictionary,
    template: TemplatePatch | None = None,
    fraction: float = 0.99,
) -> SupportTrace:
    """Energy-support statistics of a patch or coefficient sequence.

    ``source`` rows are either aligned patches (length matching the
    dictionary rows; a template is then required and each frame is fitted by
    least squares) or ready coefficient vectors (length matching the
    dictionary columns).
    """
    source = np.atleast_2d(np.asarray(source, dtype=float))
    if source.shape[1] == dictionary.n_lambda:
        coeffs = source
    elif source.shape[1] == dictionary.n_pixels:
        if template is None:
            raise ValueError("fitting patches requires the template")
        coeffs = np.stack([ml_coeff_fit(row, template, dictionary) for row in source])
    else:
        raise ValueError(
            "source rows must match the dictionary rows (patches) or columns (coefficients)"
        )
    return support_trace(coeffs, fraction)


def write_membership_csv(trace: SupportTrace, path) -> None:
    """0/1 matrix of support membership, frames down, indices across."""
    matrix = trace.membership_matrix()
    with open(path, "w") as fh:
        fh.write("frame," + ",".join(f"idx_{k}" for k in range(trace.n_lambda)) + "\n")
        for t, row in enumerate(matrix):
            fh.write(f"{t}," + ",".join(str(int(v)) for v in row) + "\n")


def parse_filter_label(label: str, default_d: int) -> FilterSpec:
    """A label is a variant name with an optional ``-<d>`` order suffix."""
    from .filters import VARIANTS

    head, _, tail = label.rpartition("-")
    if head and tail.isdigit():
        variant, d = head, int(tail)
    else:
        variant, d = label, default_d
    if variant not in VARIANTS:
        raise ValueError(f"unknown filter label {label!r}")
    return FilterSpec(label=label, variant=variant, d=d)


def sim_config_to_kv(cfg: SimConfig) -> dict:
    """Flatten a simulation config for the key-value file format."""
    kv = dict(cfg.params.to_config())
    kv.update(
        seed=cfg.seed,
        n_frames=cfg.n_frames,
        frame_height=cfg.frame_height,
        frame_width=cfg.frame_width,
        template_height=cfg.template_height,
        template_width=cfg.template_width,
        template_pattern=cfg.template_pattern,
        template_seed=cfg.template_seed,
        d=cfg.d,
        n_pf=cfg.n_pf,
        support_change_period=cfg.support_change_period,
        initial_support_size=cfg.initial_support_size,
        n_monte_carlo=cfg.n_monte_carlo,
        regime=cfg.regime,
        n_jobs=cfg.n_jobs,
        filters=",".join(spec.label for spec in cfg.filters),
    )
    for spec in cfg.filters:
        if spec.gamma is not None:
            kv[f"{spec.label}.gamma"] = spec.gamma
        if spec.beta is not None:
            kv[f"{spec.label}.beta"] = spec.beta
    return kv


def sim_config_from_kv(kv: dict) -> SimConfig:
    """Rebuild a simulation config from a flat key-value mapping.

    Missing keys take the dataclass defaults; unknown keys (beyond the
    per-filter ``<label>.gamma`` / ``<label>.beta`` overrides) are an error.
    """
    from dataclasses import replace

    kv = dict(kv)
    base = SimConfig()
    param_keys = set(default_params().to_config())
    param_kv = {k: kv.pop(k) for k in list(kv) if k in param_keys}
    params = (
        ModelParams.from_config({**default_params().to_config(), **param_kv})
        if param_kv
        else default_params()
    )

    int_keys = (
        "seed",
        "n_frames",
        "frame_height",
        "frame_width",
        "template_height",
        "template_width",
        "template_seed",
        "d",
        "n_pf",
        "support_change_period",
        "initial_support_size",
        "n_monte_carlo",
        "n_jobs",
    )
    fields = {}
    for key in int_keys:
        if key in kv:
            fields[key] = int(kv.pop(key))
    for key in ("template_pattern", "regime"):
        if key in kv:
            fields[key] = str(kv.pop(key))

    d = fields.get("d", base.d)
    labels = [
        s.strip() for s in str(kv.pop("filters", "")).split(",") if s.strip()
    ] or [spec.label for spec in default_filters(d)]
    specs = []
    for label in labels:
        spec = parse_filter_label(label, d)
        gamma = kv.pop(f"{label}.gamma", None)
        beta = kv.pop(f"{label}.beta", None)
        specs.append(
            replace(
                spec,
                gamma=None if gamma is None else float(gamma),
                beta=None if beta is None else float(beta),
            )
        )
    if kv:
        raise ValueError(f"unknown config keys: {sorted(kv)}")
    return SimConfig(params=params, filters=tuple(specs), **fields)
