"""Stein derivative estimators against closed-form Gaussian convolutions."""

import math

import numpy as np
import pytest

from steinpinn import (
    CapabilityError,
    ConfigError,
    NumericError,
    SmoothedModel,
    SmoothingConfig,
    estimate,
    estimator_stats,
    forward,
    grad_anti,
    grad_cv,
    grad_vanilla,
    hessian_vanilla,
    init_params,
    laplacian_anti,
    laplacian_cv,
    laplacian_vanilla,
    lipschitz_bound,
    mlp_spec,
    partial_laplacian,
    sample_noise,
    smoothed_value,
)
from steinpinn.estimators import NoiseBatch, row_weights, sample_noise_for_point, substream

from conftest import ConstantBase, LinearBase, QuadraticBase, SinBase, make_bases


def cfg(sigma=0.1, samples=4096, variant="vanilla", seed=0):
    return SmoothingConfig(sigma, samples, variant, seed)


def test_smoothing_config_validation():
    with pytest.raises(ConfigError):
        SmoothingConfig(0.0, 8)
    with pytest.raises(ConfigError):
        SmoothingConfig(0.1, 0)
    with pytest.raises(ConfigError):
        SmoothingConfig(0.1, 8, "bogus")
    with pytest.raises(ConfigError):
        SmoothingConfig(0.1, 7, "cv_antithetic")  # odd K cannot form pairs
    SmoothingConfig(0.1, 8, "cv_antithetic")


def test_noise_columns_centered():
    c = cfg(sigma=0.5, samples=8192)
    noise = sample_noise(c, dim=6)
    bound = 5.0 * c.sigma / math.sqrt(c.samples)
    assert np.all(np.abs(noise.draws.mean(axis=0)) < bound)


def test_noise_antithetic_rows_are_exact_negations():
    noise = sample_noise(cfg(samples=64, variant="cv_antithetic"), dim=5)
    assert noise.paired
    assert np.array_equal(noise.draws[0::2], -noise.draws[1::2])
    assert noise.samples == 64


def test_noise_deterministic():
    c = cfg(samples=32, seed=77)
    a = sample_noise(c, 4, point_index=3, repeat_index=9)
    b = sample_noise(c, 4, point_index=3, repeat_index=9)
    assert np.array_equal(a.draws, b.draws)
    other = sample_noise(c, 4, point_index=4, repeat_index=9)
    assert not np.array_equal(a.draws, other.draws)


def test_noise_keyed_by_point_value():
    c = cfg(samples=16, seed=5)
    x = np.array([0.25, -1.5])
    a = sample_noise_for_point(c, x)
    b = sample_noise_for_point(c, x.copy())
    assert np.array_equal(a.draws, b.draws)
    assert not np.array_equal(a.draws, sample_noise_for_point(c, x + 1e-9).draws)


# --- value -----------------------------------------------------------------


def test_smoothed_value_constant_exact():
    base = ConstantBase(2.5, 3)
    noise = sample_noise(cfg(samples=128), 3)
    assert smoothed_value(base, np.zeros(3), noise) == 2.5


def test_smoothed_value_linear_antithetic_cancels():
    base = LinearBase(np.array([1.0, -2.0, 0.5]), 0.3)
    x = np.array([0.4, 0.1, -0.7])
    noise = sample_noise(cfg(samples=256, variant="cv_antithetic"), 3)
    got = smoothed_value(base, x, noise)
    assert got == pytest.approx(base(x[None, :])[0], rel=1e-13)


def test_smoothed_value_quadratic_mean_over_seeds():
    # u(0) = E||delta||^2 = sigma^2 d = 0.02 for sigma=0.1, d=2
    base = QuadraticBase(2.0 * np.eye(2))  # f = ||x||^2
    sigma, d = 0.1, 2
    vals = []
    for seed in range(400):
        noise = sample_noise(cfg(sigma, 256, seed=seed), d)
        vals.append(smoothed_value(base, np.zeros(d), noise))
    vals = np.asarray(vals)
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - 0.02) <= 3.0 * se


def test_smoothed_value_rejects_nonfinite_base():
    def bad(pts):
        out = np.zeros(pts.shape[0])
        out[3] = np.inf
        return out

    noise = sample_noise(cfg(samples=16), 2)
    with pytest.raises(NumericError, match="sample 3"):
        smoothed_value(bad, np.zeros(2), noise)


# --- unbiasedness against closed forms --------------------------------------

GRAD_OPS = {
    "vanilla": grad_vanilla,
    "control_variate": grad_cv,
    "cv_antithetic": grad_anti,
}
LAP_OPS = {
    "vanilla": laplacian_vanilla,
    "control_variate": laplacian_cv,
    "cv_antithetic": laplacian_anti,
}


def batched_mean_and_se(fn, n_batches):
    out = np.asarray([fn(i) for i in range(n_batches)])
    mean = out.mean(axis=0)
    se = out.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return mean, se


@pytest.mark.parametrize("variant", list(GRAD_OPS))
@pytest.mark.parametrize("base_name", ["constant", "linear", "quadratic", "sin"])
def test_gradient_unbiased(variant, base_name):
    d, sigma = 5, 0.1
    base = make_bases(d, seed=3)[base_name]
    x = np.random.default_rng(11).standard_normal(d) * 0.5
    truth = base.conv_grad(x, sigma)
    op = GRAD_OPS[variant]
    c = cfg(sigma, 2048, variant if variant == "cv_antithetic" else "vanilla", seed=31)

    mean, se = batched_mean_and_se(
        lambda r: op(base, x, sample_noise(c, d, repeat_index=r)), 160
    )
    assert np.all(np.abs(mean - truth) <= 3.0 * se + 1e-12)


@pytest.mark.parametrize("variant", list(LAP_OPS))
@pytest.mark.parametrize("base_name", ["constant", "linear", "quadratic", "sin"])
def test_laplacian_unbiased(variant, base_name):
    d, sigma = 5, 0.1
    base = make_bases(d, seed=4)[base_name]
    x = np.random.default_rng(12).standard_normal(d) * 0.5
    truth = base.conv_lap(x, sigma)
    op = LAP_OPS[variant]
    c = cfg(sigma, 4096, variant if variant == "cv_antithetic" else "vanilla", seed=37)

    mean, se = batched_mean_and_se(
        lambda r: op(base, x, sample_noise(c, d, repeat_index=r)), 64
    )
    assert abs(mean - truth) <= 3.0 * se + 1e-12


def test_grad_vanilla_sin_closed_form():
    # grad u at 0 for f = sin(x_1) is exp(-sigma^2/2) e_1 ~ 0.995012 e_1
    d, sigma = 4, 0.1
    base = SinBase(d)
    truth = math.exp(-0.5 * sigma**2)
    assert truth == pytest.approx(0.995012, abs=5e-7)
    mean, se = batched_mean_and_se(
        lambda r: grad_vanilla(base, np.zeros(d), sample_noise(cfg(sigma, 8192, seed=7), d, repeat_index=r)),
        64,
    )
    assert abs(mean[0] - truth) <= 3.0 * se[0]
    assert np.all(np.abs(mean[1:]) <= 3.0 * se[1:] + 1e-12)


def test_laplacian_quadratic_closed_form():
    # f = ||x||^2 / 2 has Laplacian d everywhere, smoothing included
    d = 6
    base = QuadraticBase(np.eye(d))
    x = np.random.default_rng(0).standard_normal(d)
    for variant, op in LAP_OPS.items():
        c = cfg(0.1, 4096, variant if variant == "cv_antithetic" else "vanilla", seed=3)
        mean, se = batched_mean_and_se(
            lambda r: op(base, x, sample_noise(c, d, repeat_index=r)), 48
        )
        assert abs(mean - d) <= 3.0 * se


# --- exact zero properties ---------------------------------------------------


def test_cv_estimators_vanish_identically_on_constants():
    base = ConstantBase(3.3, 4)
    x = np.ones(4)
    noise_iid = sample_noise(cfg(samples=64), 4)
    noise_pair = sample_noise(cfg(samples=64, variant="cv_antithetic"), 4)
    assert np.all(grad_cv(base, x, noise_iid) == 0.0)
    assert laplacian_cv(base, x, noise_iid) == 0.0
    assert np.all(grad_anti(base, x, noise_pair) == 0.0)
    assert laplacian_anti(base, x, noise_pair) == 0.0


def test_antithetic_laplacian_vanishes_on_affine():
    base = LinearBase(np.array([2.0, -1.0, 0.25]), 5.0)
    x = np.array([0.3, 0.6, -0.2])
    noise = sample_noise(cfg(sigma=0.5, samples=128, variant="cv_antithetic"), 3)
    # second differences of an affine map vanish up to float rounding
    assert abs(laplacian_anti(base, x, noise)) <= 1e-12
    assert abs(grad_anti(base, x, noise) @ np.ones(3) - base.a @ np.ones(3)) < 1.0  # sane scale


def test_grad_anti_quadratic_expectation():
    d = 4
    A = np.diag([1.0, -2.0, 0.5, 3.0])
    base = QuadraticBase(A)
    x = np.array([0.2, -0.4, 1.0, 0.1])
    c = cfg(0.2, 4096, "cv_antithetic", seed=13)
    mean, se = batched_mean_and_se(
        lambda r: grad_anti(base, x, sample_noise(c, d, repeat_index=r)), 48
    )
    assert np.all(np.abs(mean - A @ x) <= 3.0 * se + 1e-12)


# --- hessian -----------------------------------------------------------------


def test_hessian_vanilla_quadratic():
    d = 3
    A = np.array([[2.0, 0.5, 0.0], [0.5, -1.0, 0.3], [0.0, 0.3, 0.7]])
    base = QuadraticBase(A)
    x = np.random.default_rng(5).standard_normal(d)
    c = cfg(0.2, 8192, seed=19)
    mean, se = batched_mean_and_se(
        lambda r: hessian_vanilla(base, x, sample_noise(c, d, repeat_index=r)), 96
    )
    assert np.all(np.abs(mean - A) <= 3.0 * se + 1e-10)


def test_hessian_vanilla_linear_and_symmetry():
    d = 4
    base = LinearBase(np.arange(1.0, d + 1.0))
    x = np.zeros(d)
    c = cfg(0.3, 8192, seed=23)
    h = hessian_vanilla(base, x, sample_noise(c, d))
    assert np.array_equal(h, h.T)  # symmetric by construction
    mean, se = batched_mean_and_se(
        lambda r: hessian_vanilla(base, x, sample_noise(c, d, repeat_index=r)), 96
    )
    assert np.all(np.abs(mean) <= 3.0 * se + 1e-10)


def test_hessian_guard():
    base = ConstantBase(1.0, 600)
    noise = sample_noise(cfg(samples=8), 600)
    with pytest.raises(CapabilityError):
        hessian_vanilla(base, np.zeros(600), noise)


def test_trace_hessian_matches_laplacian_same_batch():
    params = init_params(mlp_spec(6, layers=3, hidden_dim=16), seed=2)
    f = lambda pts: forward(params, pts)
    x = np.random.default_rng(2).standard_normal(6)
    noise = sample_noise(cfg(0.1, 512), 6)
    tr = float(np.trace(hessian_vanilla(f, x, noise)))
    lap = laplacian_vanilla(f, x, noise)
    # identical algebraic quantity; float reassociation only
    assert tr == pytest.approx(lap, rel=1e-12)


def test_estimate_with_hessian_trace_equals_laplacian_exactly():
    params = init_params(mlp_spec(5, layers=3, hidden_dim=12), seed=8)
    f = lambda pts: forward(params, pts)
    x = np.zeros(5)
    for variant in ("vanilla", "control_variate", "cv_antithetic"):
        noise = sample_noise(cfg(0.1, 128, variant), 5)
        est = estimate(f, x, noise, variant, with_hessian=True)
        assert est.laplacian == float(np.trace(est.hessian))
        assert np.array_equal(est.hessian, est.hessian.T)


# --- partial laplacian -------------------------------------------------------


def test_partial_laplacian_full_set_equals_full():
    params = init_params(mlp_spec(5, layers=3, hidden_dim=12), seed=3)
    f = lambda pts: forward(params, pts)
    x = np.random.default_rng(3).standard_normal(5)
    noise = sample_noise(cfg(0.1, 256), 5)
    assert partial_laplacian(f, x, noise, coords=range(5)) == laplacian_vanilla(f, x, noise)


def test_partial_laplacian_time_only_linear():
    # f(x, t) = t and S = spatial coords: expectation 0
    d = 4
    base = LinearBase(np.array([0.0, 0.0, 0.0, 1.0]))
    x = np.zeros(d)
    c = cfg(0.2, 2048, seed=29)
    mean, se = batched_mean_and_se(
        lambda r: partial_laplacian(base, x, sample_noise(c, d, repeat_index=r), coords=[0, 1, 2]),
        48,
    )
    assert abs(mean) <= 3.0 * se + 1e-12


def test_partial_laplacian_quadratic_subset():
    # f = ||x||^2 / 2 over a subset S gives |S|
    d = 6
    base = QuadraticBase(np.eye(d))
    x = np.random.default_rng(6).standard_normal(d)
    coords = [0, 2, 5]
    for variant in ("vanilla", "control_variate", "cv_antithetic"):
        c = cfg(0.15, 4096, variant, seed=31)
        mean, se = batched_mean_and_se(
            lambda r: partial_laplacian(
                base, x, sample_noise(c, d, repeat_index=r), coords, variant=variant
            ),
            48,
        )
        assert abs(mean - len(coords)) <= 3.0 * se


def test_partial_laplacian_coord_validation():
    base = ConstantBase(0.0, 3)
    noise = sample_noise(cfg(samples=8), 3)
    with pytest.raises(ConfigError):
        partial_laplacian(base, np.zeros(3), noise, coords=[])
    with pytest.raises(ConfigError):
        partial_laplacian(base, np.zeros(3), noise, coords=[3])
    with pytest.raises(ConfigError):
        partial_laplacian(base, np.zeros(3), noise, coords=None)


def test_antithetic_ops_reject_unpaired_noise():
    base = ConstantBase(0.0, 3)
    noise = sample_noise(cfg(samples=8), 3)
    with pytest.raises(ConfigError):
        grad_anti(base, np.zeros(3), noise)
    with pytest.raises(ConfigError):
        laplacian_anti(base, np.zeros(3), noise)


# --- lipschitz bound ---------------------------------------------------------


def test_lipschitz_bound_values():
    assert lipschitz_bound(1.0, 1.0) == pytest.approx(0.7978845608028654, rel=1e-15)
    assert lipschitz_bound(1.0, 0.1) == pytest.approx(7.978845608028654, rel=1e-15)
    assert lipschitz_bound(0.0, 2.0) == 0.0
    with pytest.raises(ConfigError):
        lipschitz_bound(-1.0, 1.0)
    with pytest.raises(ConfigError):
        lipschitz_bound(1.0, 0.0)


def test_sampled_lipschitz_quotient_below_bound():
    # tanh output bounds |f| by 1; sampled quotients of u stay below the cap
    spec = mlp_spec(3, layers=3, hidden_dim=16, output_activation="tanh")
    params = init_params(spec, seed=14)
    sigma = 0.5
    model = SmoothedModel(
        base=lambda pts: forward(params, pts),
        smoothing=SmoothingConfig(sigma, 2048, "vanilla", seed=3),
        dim=3,
    )
    rng = np.random.default_rng(10)
    xs = rng.uniform(-2, 2, size=(200, 3))
    ys = rng.uniform(-2, 2, size=(200, 3))
    ux = model.values(xs, seed=1)
    uy = model.values(ys, seed=1)
    quot = np.abs(ux - uy) / np.linalg.norm(xs - ys, axis=1)
    assert quot.max() <= lipschitz_bound(1.0, sigma) + 0.05  # slack for MC noise


# --- stats and variance scaling ----------------------------------------------


def test_estimator_stats_constant_cv_zero_variance():
    base = ConstantBase(4.0, 3)
    stats = estimator_stats(base, np.zeros(3), cfg(0.1, 64, "control_variate"), repeats=8)
    assert stats.laplacian_variance == 0.0
    assert np.all(stats.gradient_variance == 0.0)


def test_estimator_stats_vanilla_grad_variance_scaling():
    # Var per coordinate of mean_k delta_k c / sigma^2 is c^2 / (sigma^2 K):
    # halving sigma quadruples it
    c_val, d, K = 2.0, 3, 256
    base = ConstantBase(c_val, d)
    out = {}
    for sigma in (0.2, 0.1):
        stats = estimator_stats(base, np.zeros(d), cfg(sigma, K, "vanilla", seed=2), repeats=512)
        out[sigma] = stats.gradient_variance.mean()
        expected = c_val**2 / (sigma**2 * K)
        assert out[sigma] == pytest.approx(expected, rel=0.35)
    assert out[0.1] / out[0.2] == pytest.approx(4.0, rel=0.5)


def test_estimator_stats_rejects_duplicate_seeds():
    base = ConstantBase(1.0, 2)
    with pytest.raises(ConfigError):
        estimator_stats(base, np.zeros(2), cfg(0.1, 16), repeats=2, seeds=[7, 7])
    with pytest.raises(ConfigError):
        estimator_stats(base, np.zeros(2), cfg(0.1, 16), repeats=1)


def test_estimator_stats_deterministic():
    params = init_params(mlp_spec(4, layers=3, hidden_dim=8), seed=5)
    f = lambda pts: forward(params, pts)
    a = estimator_stats(f, np.zeros(4), cfg(0.1, 64, "cv_antithetic", seed=9), repeats=4)
    b = estimator_stats(f, np.zeros(4), cfg(0.1, 64, "cv_antithetic", seed=9), repeats=4)
    assert a.laplacian_mean == b.laplacian_mean
    assert np.array_equal(a.gradient_mean, b.gradient_mean)


def laplacian_spread(params, x, sigma, variant, K=1024, repeats=64, seed=0):
    f = lambda pts: forward(params, pts)
    stats = estimator_stats(
        f, x, SmoothingConfig(sigma, K, variant, seed=seed), repeats=repeats
    )
    return stats.laplacian_variance


def test_variance_ordering_anti_cv_vanilla():
    d = 20
    params = init_params(mlp_spec(d, layers=4, hidden_dim=32), seed=21)
    x = np.random.default_rng(21).standard_normal(d) * 0.3
    v = laplacian_spread(params, x, 0.01, "vanilla")
    c = laplacian_spread(params, x, 0.01, "control_variate")
    a = laplacian_spread(params, x, 0.01, "cv_antithetic")
    assert a <= c <= v


def test_sigma_scaling_of_laplacian_spread():
    """Spread scalings in sigma: vanilla ~ 1/sigma^2, cv ~ 1/sigma, anti ~ 1.

    Measured as standard deviations; the corresponding variances scale
    with the squares (1/sigma^4, 1/sigma^2, 1).
    """
    d = 20
    params = init_params(mlp_spec(d, layers=4, hidden_dim=32), seed=22)
    x = np.random.default_rng(22).standard_normal(d) * 0.3

    def std_ratio(variant):
        hi = math.sqrt(laplacian_spread(params, x, 0.01, variant, repeats=96, seed=1))
        lo = math.sqrt(laplacian_spread(params, x, 0.1, variant, repeats=96, seed=2))
        return hi / lo

    r_van = std_ratio("vanilla")
    assert 20.0 <= r_van <= 500.0  # ~100
    r_cv = std_ratio("control_variate")
    assert 10.0 / 3.0 <= r_cv <= 30.0  # ~10
    r_anti = std_ratio("cv_antithetic")
    assert 1.0 / 3.0 <= r_anti <= 3.0  # ~1


def test_grad_cv_variance_independent_of_sigma():
    d = 8
    params = init_params(mlp_spec(d, layers=3, hidden_dim=16), seed=6)
    f = lambda pts: forward(params, pts)
    x = np.random.default_rng(6).standard_normal(d) * 0.2
    out = {}
    for sigma in (0.1, 0.01):
        stats = estimator_stats(f, x, SmoothingConfig(sigma, 512, "control_variate", seed=3), repeats=96)
        out[sigma] = stats.gradient_variance.mean()
    ratio = out[0.01] / out[0.1]
    assert 1.0 / 3.0 <= ratio <= 3.0


# --- shared machinery --------------------------------------------------------


def test_row_weights_reproduce_ops():
    params = init_params(mlp_spec(4, layers=3, hidden_dim=10), seed=7)
    f = lambda pts: forward(params, pts)
    x = np.random.default_rng(7).standard_normal(4)
    for variant in ("vanilla", "control_variate", "cv_antithetic"):
        noise = sample_noise(cfg(0.1, 64, variant), 4)
        w = row_weights(noise, variant)
        vals = f(x[None, :] + noise.draws)
        f0 = f(x[None, :])[0]
        got_val = w.value @ vals
        got_grad = w.grad.T @ vals + w.center_grad * f0
        got_lap = w.lap @ vals + w.center_lap * f0
        assert got_val == pytest.approx(smoothed_value(f, x, noise), rel=1e-12)
        op_g = {"vanilla": grad_vanilla, "control_variate": grad_cv, "cv_antithetic": grad_anti}[variant]
        op_l = {"vanilla": laplacian_vanilla, "control_variate": laplacian_cv, "cv_antithetic": laplacian_anti}[variant]
        assert np.allclose(got_grad, op_g(f, x, noise), rtol=1e-11, atol=1e-13)
        assert got_lap == pytest.approx(op_l(f, x, noise), rel=1e-11, abs=1e-12)


def test_estimate_matches_individual_ops():
    params = init_params(mlp_spec(3, layers=3, hidden_dim=8), seed=4)
    f = lambda pts: forward(params, pts)
    x = np.random.default_rng(4).standard_normal(3)
    noise = sample_noise(cfg(0.1, 64, "cv_antithetic"), 3)
    est = estimate(f, x, noise, "cv_antithetic")
    assert est.value == pytest.approx(smoothed_value(f, x, noise), rel=1e-12)
    assert np.allclose(est.gradient, grad_anti(f, x, noise), rtol=1e-12)
    assert est.laplacian == pytest.approx(laplacian_anti(f, x, noise), rel=1e-12)
    assert est.sample_count == 64
    assert est.laplacian_variance >= 0.0


def test_estimates_deterministic_bitwise():
    params = init_params(mlp_spec(5, layers=3, hidden_dim=8), seed=1)
    f = lambda pts: forward(params, pts)
    x = np.ones(5) * 0.2
    c = cfg(0.05, 128, "cv_antithetic", seed=123)
    n1 = sample_noise(c, 5, point_index=2, repeat_index=8)
    n2 = sample_noise(c, 5, point_index=2, repeat_index=8)
    e1 = estimate(f, x, n1, "cv_antithetic")
    e2 = estimate(f, x, n2, "cv_antithetic")
    assert e1.value == e2.value
    assert np.array_equal(e1.gradient, e2.gradient)
    assert e1.laplacian == e2.laplacian


def test_smoothed_model_chunking_consistent():
    params = init_params(mlp_spec(3, layers=3, hidden_dim=8), seed=2)
    model = SmoothedModel(
        base=lambda pts: forward(params, pts),
        smoothing=SmoothingConfig(0.1, 64, "cv_antithetic", seed=5),
        dim=3,
    )
    pts = np.random.default_rng(1).standard_normal((7, 3))
    all_at_once = model.values(pts)
    one_by_one = np.array([model.values(p) for p in pts])
    assert np.array_equal(all_at_once, one_by_one)
    # permutation invariance comes from value-keyed noise
    perm = np.random.default_rng(2).permutation(7)
    assert np.array_equal(model.values(pts[perm]), all_at_once[perm])
