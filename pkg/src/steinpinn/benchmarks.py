"""Ablation drivers and loss-evaluation timing benchmarks.

The sigma and sample-size ablations run full (desk-scale) training jobs
over a grid and report final hold-out errors plus wall-clock time. The
timing benchmark compares the cost of one interior-loss evaluation under
the estimator path against the exact stacked-derivative path as the
input dimension grows.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation, problems, training
from .errors import ConfigError
from .estimators import SmoothingConfig, row_weights, sample_noise, substream, substream_seed
from .network import forward, init_params, input_jet, mlp_spec
from .problems import ProblemSpec

SIGMA_GRID = (1.0, 1e-1, 1e-2, 1e-3)
SAMPLES_GRID = (256, 512, 1024, 2048)
TIMING_DIMS = (10, 100, 1000)


@dataclass
class AblationRow:
    parameter: str
    value: float
    l1_relative: float
    l2_relative: float
    train_seconds: float


@dataclass
class TimingRow:
    method: str  # stein | exact_stacked
    dimension: int
    seconds: float  # median over replicates
    replicates: int


def _run_training(problem, net_spec, config):
    t0 = time.perf_counter()
    _, report = training.train(problem, net_spec, config)
    seconds = time.perf_counter() - t0
    return report, seconds


def ablation_sigma(problem: ProblemSpec, net_spec, train_config, sigma_grid=SIGMA_GRID):
    """One full training run per noise level; fixed sample count."""
    rows = []
    for sigma in sigma_grid:
        cfg = dataclasses.replace(
            train_config,
            smoothing=dataclasses.replace(train_config.smoothing, sigma=float(sigma)),
        )
        report, seconds = _run_training(problem, net_spec, cfg)
        rows.append(AblationRow("sigma", float(sigma), report.final_l1, report.final_l2, seconds))
    return rows


def ablation_samples(problem: ProblemSpec, net_spec, train_config, samples_grid=SAMPLES_GRID):
    """One full training run per sample count; fixed noise level."""
    rows = []
    for k in samples_grid:
        cfg = dataclasses.replace(
            train_config,
            smoothing=dataclasses.replace(train_config.smoothing, samples=int(k)),
        )
        report, seconds = _run_training(problem, net_spec, cfg)
        rows.append(AblationRow("samples", int(k), report.final_l1, report.final_l2, seconds))
    return rows


# ---------------------------------------------------------------------------
# timing benchmark
# ---------------------------------------------------------------------------


def _stein_interior_loss(params, pts, config):
    """Estimated interior loss (Laplacian residual against a constant)."""
    k = config.samples
    p, d = pts.shape
    total = 0.0
    for i in range(p):
        noise = sample_noise(config, d, point_index=i)
        w = row_weights(noise, config.variant)
        vals = forward(params, pts[i] + noise.draws)
        lap = w.lap @ vals
        if w.needs_center:
            lap += w.center_lap * forward(params, pts[i][None, :])[0]
        total += (lap - 1.0) ** 2
    return total / p


def _exact_interior_loss(params, pts):
    """Same loss through exact stacked derivative propagation."""
    jet = input_jet(params, pts)
    return float(np.mean((jet.laplacian - 1.0) ** 2))


def timing_benchmark(dims=TIMING_DIMS, width=64, samples=512, num_points=64,
                     replicates=5, variant="cv_antithetic", seed=0, threads=1):
    """Median wall-clock of one interior-loss evaluation per method per dim.

    Runs single-threaded by default so scheduler noise does not pollute
    the medians; pass threads=None to use the ambient thread pool.
    """
    if replicates < 5:
        raise ConfigError(f"need at least 5 replicates, got {replicates}")
    rows = []
    limiter = threadpool_limits(limits=threads) if threads is not None else None
    try:
        for d in dims:
            spec = mlp_spec(d, layers=4, hidden_dim=width)
            params = init_params(spec, seed=substream_seed(seed, d))
            pts = substream(seed, d, 1).standard_normal((num_points, d))
            config = SmoothingConfig(0.1, samples, variant, seed=substream_seed(seed, d, 2))

            _stein_interior_loss(params, pts, config)  # warmup
            reps = []
            for _ in range(replicates):
                t0 = time.perf_counter()
                _stein_interior_loss(params, pts, config)
                reps.append(time.perf_counter() - t0)
            rows.append(TimingRow("stein", d, float(np.median(reps)), replicates))

            _exact_interior_loss(params, pts)  # warmup
            reps = []
            for _ in range(replicates):
                t0 = time.perf_counter()
                _exact_interior_loss(params, pts)
                reps.append(time.perf_counter() - t0)
            rows.append(TimingRow("exact_stacked", d, float(np.median(reps)), replicates))
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return rows


def growth_factors(rows):
    """(method -> t(max dim) / t(min dim)) from timing rows."""
    by_method = {}
    for row in rows:
        by_method.setdefault(row.method, {})[row.dimension] = row.seconds
    out = {}
    for method, times in by_method.items():
        lo, hi = min(times), max(times)
        out[method] = times[hi] / times[lo]
    return out


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def _write_csv(path_or_buf, header, rows):
    """RFC-4180-style CSV with a mandatory header row; repr-exact floats."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    handle = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.writer(handle, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    finally:
        if own:
            handle.close()


def write_study_csv(path, rows):
    _write_csv(
        path,
        ["variant", "kind", "samples", "mean_abs_error"],
        [(r.variant, r.kind, r.samples, r.mean_abs_error) for r in rows],
    )


def write_ablation_csv(path, rows):
    _write_csv(
        path,
        ["parameter", "value", "l1_relative", "l2_relative", "train_seconds"],
        [(r.parameter, r.value, r.l1_relative, r.l2_relative, r.train_seconds) for r in rows],
    )


def write_timing_csv(path, rows):
    _write_csv(
        path,
        ["method", "dimension", "seconds_median", "replicates"],
        [(r.method, r.dimension, r.seconds, r.replicates) for r in rows],
    )


def csv_text(writer_fn, rows) -> str:
    buf = io.StringIO()
    writer_fn(buf, rows)
    return buf.getvalue()
