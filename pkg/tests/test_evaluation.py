"""Error metrics, the estimator accuracy study, ablation/timing plumbing."""

import math

import numpy as np
import pytest

from steinpinn import ConfigError, SmoothingConfig, forward, init_params, mlp_spec
from steinpinn.benchmarks import (
    csv_text,
    growth_factors,
    timing_benchmark,
    write_ablation_csv,
    write_study_csv,
    write_timing_csv,
)
from steinpinn.evaluation import (
    NetworkBase,
    estimator_error_study,
    loglog_slope,
    model_handle,
    relative_errors,
    relative_metrics,
    smoothed_derivative_oracle,
    study_rows_to_table,
)
from steinpinn.problems import heat, poisson2d, reference_value, sample_eval_points

from conftest import QuadraticBase, SinBase


# --- metrics -------------------------------------------------------------------


def test_relative_metrics_scaling_identity():
    rng = np.random.default_rng(0)
    ref = rng.standard_normal(500)
    for c in (0.5, 0.99, 1.01, 2.0):
        l1, l2 = relative_metrics(c * ref, ref)
        assert l1 == pytest.approx(abs(c - 1.0), rel=1e-12)
        assert l2 == pytest.approx(abs(c - 1.0), rel=1e-12)


def test_relative_metrics_zero_reference_rejected():
    with pytest.raises(ConfigError):
        relative_metrics(np.ones(4), np.zeros(4))


def test_relative_errors_exact_model_is_zero():
    problem = heat(dim=6)
    exact = lambda pts: reference_value(problem, pts)[0]
    report = relative_errors(exact, problem, eval_seed=3, num_points=200)
    assert report.l1_relative == 0.0 and report.l2_relative == 0.0
    assert report.num_eval_points == 200
    assert report.reference_kind == "closed_form"


def test_relative_errors_scaled_model():
    problem = poisson2d()
    scaled = lambda pts: 1.01 * reference_value(problem, pts)[0]
    report = relative_errors(scaled, problem, eval_seed=5, num_points=300)
    assert report.l1_relative == pytest.approx(0.01, rel=1e-10)
    assert report.l2_relative == pytest.approx(0.01, rel=1e-10)


def test_relative_errors_smoothed_model_eval_seed_stability():
    spec = mlp_spec(2, layers=3, hidden_dim=8)
    params = init_params(spec, seed=3)
    model = model_handle(params, SmoothingConfig(0.05, 256, "cv_antithetic", seed=0))
    problem = poisson2d()
    a = relative_errors(model, problem, eval_seed=1, num_points=150)
    b = relative_errors(model, problem, eval_seed=1, num_points=150)
    assert a.l1_relative == b.l1_relative  # deterministic
    c = relative_errors(model, problem, eval_seed=2, num_points=150)
    assert c.l1_relative != a.l1_relative
    assert abs(c.l1_relative - a.l1_relative) <= 0.5 * (c.l1_relative + a.l1_relative)


# --- study oracle ----------------------------------------------------------------


def test_oracle_matches_closed_form_on_analytic_base():
    d, sigma = 6, 0.15
    rng = np.random.default_rng(2)
    A = rng.standard_normal((d, d))
    base = QuadraticBase(A + A.T, rng.standard_normal(d))
    x = rng.standard_normal(d)
    grad, lap, var = smoothed_derivative_oracle(base, x, sigma, samples=200_000, seed=5,
                                                var_target=1e-5)
    se3 = 3.0 * math.sqrt(max(var, 1e-30))
    assert abs(lap - base.conv_lap(x, sigma)) <= se3 + 1e-9
    # gradient of the convolved quadratic is exact: A x + b
    assert np.allclose(grad, base.conv_grad(x, sigma), atol=5e-3)


def test_oracle_consistent_for_network_base():
    spec = mlp_spec(5, layers=3, hidden_dim=12)
    base = NetworkBase(init_params(spec, seed=11))
    x = np.full(5, 0.2)
    g1, l1, _ = smoothed_derivative_oracle(base, x, 0.1, samples=60_000, seed=1, var_target=1e-4)
    g2, l2, _ = smoothed_derivative_oracle(base, x, 0.1, samples=60_000, seed=2, var_target=1e-4)
    assert np.allclose(g1, g2, atol=2e-3)
    assert abs(l1 - l2) <= 2e-2


def test_oracle_warns_when_target_unreachable():
    base = SinBase(3)
    with pytest.warns(UserWarning, match="oracle variance"):
        smoothed_derivative_oracle(base, np.zeros(3), 0.5, samples=64, seed=0,
                                   var_target=1e-12, max_doublings=1)


# --- study ------------------------------------------------------------------------


def test_study_error_decreases_and_orders():
    d = 12
    base = NetworkBase(init_params(mlp_spec(d, layers=3, hidden_dim=16), seed=21))
    k_grid = (16, 64, 256, 1024, 4096)
    rows = estimator_error_study(
        base, k_grid=k_grid, seed=9, num_points=6, sigma=0.1,
        oracle="samples", oracle_samples=40_000, oracle_var_target=1e-4,
    )
    table = study_rows_to_table(rows)
    assert set(table) == {(v, kind) for v in ("vanilla", "control_variate", "cv_antithetic")
                          for kind in ("gradient", "laplacian")}
    for (variant, kind), series in table.items():
        ks = [k for k, _ in series]
        errs = [e for _, e in series]
        assert ks == sorted(ks)
        slope = loglog_slope(ks, errs)
        assert -1.0 <= slope <= -0.2  # Monte Carlo decay
    # variance-reduction ordering for the Laplacian at the largest K
    lap_at = {v: dict(table[(v, "laplacian")])[4096] for v in ("vanilla", "control_variate", "cv_antithetic")}
    assert lap_at["cv_antithetic"] < lap_at["control_variate"] < lap_at["vanilla"]


def test_study_closed_form_oracle_path():
    base = SinBase(4)
    rows = estimator_error_study(
        base, k_grid=(8, 32), variants=("vanilla",), seed=3, num_points=5, sigma=0.2,
        oracle="closed_form",
    )
    assert len(rows) == 4
    assert all(r.mean_abs_error >= 0 for r in rows)


def test_study_validation():
    base = SinBase(3)
    with pytest.raises(ConfigError):
        estimator_error_study(base, k_grid=(0, 8), seed=0, num_points=2)
    with pytest.raises(ConfigError):
        estimator_error_study(base, variants=("bogus",), seed=0, num_points=2)
    with pytest.raises(ConfigError):
        estimator_error_study(NetworkBase(init_params(mlp_spec(3), seed=0)),
                              k_grid=(8,), seed=0, num_points=1, oracle="closed_form")


# --- timing + csv -------------------------------------------------------------------


def test_timing_benchmark_rows_and_growth():
    rows = timing_benchmark(dims=(4, 16), width=8, samples=16, num_points=4, replicates=5)
    assert len(rows) == 4
    assert {r.method for r in rows} == {"stein", "exact_stacked"}
    assert all(r.seconds > 0 for r in rows)
    g = growth_factors(rows)
    assert set(g) == {"stein", "exact_stacked"}


def test_timing_benchmark_replicate_guard():
    with pytest.raises(ConfigError):
        timing_benchmark(dims=(4,), replicates=3)


def test_csv_writers_schema():
    from steinpinn.benchmarks import AblationRow, TimingRow
    from steinpinn.evaluation import EstimatorStudyRow

    text = csv_text(write_study_csv, [EstimatorStudyRow("vanilla", "laplacian", 8, 0.5)])
    lines = text.strip().split("\r\n")
    assert lines[0] == "variant,kind,samples,mean_abs_error"
    assert lines[1] == "vanilla,laplacian,8,0.5"

    text = csv_text(write_ablation_csv, [AblationRow("sigma", 0.1, 0.011, 0.012, 3.5)])
    assert text.startswith("parameter,value,l1_relative,l2_relative,train_seconds")

    text = csv_text(write_timing_csv, [TimingRow("stein", 10, 0.0123, 5)])
    assert text.splitlines()[1] == "stein,10,0.0123,5"


def test_eval_points_match_problem_measure():
    pts = sample_eval_points(poisson2d(), 1, 50)
    assert pts.shape == (50, 2)
