"""Monte Carlo derivative estimators for Gaussian-smoothed models.

A base function f and a noise level sigma define the smoothed model

    u(x) = E_{delta ~ N(0, sigma^2 I)} [ f(x + delta) ].

Derivatives of u never require differentiating f: Stein's identity turns
them into expectations of weighted f evaluations, estimated here from K
Monte Carlo samples. Three estimator families are provided:

* ``vanilla``            -- the plain identity, e.g.
                            grad u ~ mean_k (delta_k / sigma^2) f(x + delta_k)
* ``control_variate``    -- subtracts the baseline f(x), which leaves the
                            expectation unchanged but removes the leading
                            variance term,
* ``cv_antithetic``      -- additionally pairs each draw with its negation,
                            cancelling the next error order as well.

Base functions are callables mapping an (B, d) array to a (B,) array.
All sampling is driven by counter-based Philox substreams so that any
evaluation is reproducible from (seed, point, repeat) alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CapabilityError, ConfigError, NumericError

VARIANTS = ("vanilla", "control_variate", "cv_antithetic")

# Hard cap on materializing a d x d Hessian estimate; above this the
# Laplacian estimators are the supported route.
HESSIAN_DIM_LIMIT = 512

_MASK64 = 2**64 - 1


def _seed_words(seed, key):
    root = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    return tuple(int(w) & _MASK64 for w in root + tuple(key))


def substream(seed, *key) -> np.random.Generator:
    """Independent Philox stream derived from (seed, *key).

    The key words are folded into the SeedSequence entropy, so streams for
    different (point index, repeat index) tuples never collide and can be
    drawn in any order across workers. ``seed`` may itself be a tuple of
    words from an enclosing derivation.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_seed_words(seed, key))))


def substream_seed(seed, *key) -> int:
    """A derived 64-bit seed usable as the root of a child substream."""
    return int(np.random.SeedSequence(_seed_words(seed, key)).generate_state(1, np.uint64)[0])


def point_key(point) -> tuple[int, ...]:
    """Content key of a collocation point: the bit patterns of its floats.

    Keying noise by value rather than by batch position makes losses
    invariant to the order of points within a batch.
    """
    arr = np.ascontiguousarray(point, dtype=np.float64)
    return tuple(int(w) for w in arr.view(np.uint64).ravel())


@dataclass(frozen=True)
class SmoothingConfig:
    """Noise level, sample count, estimator variant, and RNG seed."""

    sigma: float
    samples: int
    variant: str = "cv_antithetic"
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma > 0.0 and math.isfinite(self.sigma)):
            raise ConfigError(f"sigma must be a positive real, got {self.sigma}")
        if self.samples < 1:
            raise ConfigError(f"samples must be >= 1, got {self.samples}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "cv_antithetic" and self.samples % 2 != 0:
            raise ConfigError(
                f"cv_antithetic stores samples as +/- pairs; samples={self.samples} is odd"
            )

    @property
    def paired(self) -> bool:
        return self.variant == "cv_antithetic"


class NoiseBatch:
    """K rows of N(0, sigma^2 I) draws.

    Paired batches hold K/2 base draws; the full K x d view with rows
    (2j, 2j+1) = (delta_j, -delta_j) is materialized lazily on first use.
    """

    __slots__ = ("sigma", "base", "paired", "_draws")

    def __init__(self, sigma, base, paired=False):
        self.sigma = float(sigma)
        self.base = np.asarray(base, dtype=np.float64)
        self.paired = bool(paired)
        self._draws = None if paired else self.base
        if self.base.ndim != 2:
            raise ConfigError("noise draws must form a (K, d) matrix")

    @property
    def samples(self) -> int:
        return self.base.shape[0] * (2 if self.paired else 1)

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    @property
    def draws(self) -> np.ndarray:
        if self._draws is None:
            full = np.empty((2 * self.base.shape[0], self.base.shape[1]))
            full[0::2] = self.base
            full[1::2] = -self.base
            self._draws = full
        return self._draws


def sample_noise(config: SmoothingConfig, dim, point_index=0, repeat_index=0) -> NoiseBatch:
    """Draw the noise batch for one point from its dedicated substream."""
    rng = substream(config.seed, point_index, repeat_index)
    return _draw(rng, config, dim)


def sample_noise_for_point(config: SmoothingConfig, point, repeat_index=0) -> NoiseBatch:
    """Noise batch keyed by the point's value (order-independent)."""
    rng = substream(config.seed, repeat_index, *point_key(point))
    return _draw(rng, config, dim=np.asarray(point).shape[-1])


def _draw(rng, config, dim):
    k = config.samples // 2 if config.paired else config.samples
    base = rng.standard_normal((k, int(dim))) * config.sigma
    return NoiseBatch(config.sigma, base, paired=config.paired)


def _eval(f, pts):
    vals = np.asarray(f(pts), dtype=np.float64).reshape(-1)
    if vals.shape[0] != pts.shape[0]:
        raise ConfigError(f"base returned {vals.shape[0]} values for {pts.shape[0]} points")
    if not np.isfinite(vals).all():
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise NumericError(f"base function returned a non-finite value at sample {bad}")
    return vals


def _point(x, noise):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != noise.dim:
        raise ConfigError(f"point has dim {x.shape[0]}, noise has dim {noise.dim}")
    return x


def _coord_subset(coords, dim):
    if coords is None:
        return None
    idx = np.asarray(coords, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise ConfigError("coordinate subset must be nonempty")
    if idx.size != np.unique(idx).size:
        raise ConfigError("coordinate subset contains duplicates")
    if idx.min() < 0 or idx.max() >= dim:
        raise ConfigError(f"coordinate subset {idx.tolist()} out of range for dim {dim}")
    if idx.size == dim:
        return None  # full coverage: identical to the unrestricted estimator
    return idx


def _require_pairs(noise):
    if not noise.paired:
        raise ConfigError("this estimator needs an antithetic (paired) noise batch")


def _lap_row_factors(noise, coords):
    """Per-row Laplacian weights (|delta_S|^2 - sigma^2 |S|) / sigma^4."""
    draws = noise.draws if coords is None else noise.draws[:, coords]
    nS = draws.shape[1]
    s2 = noise.sigma**2
    return (np.einsum("kd,kd->k", draws, draws) - s2 * nS) / (s2 * s2)


# ---------------------------------------------------------------------------
# value and first/second derivative estimators
# ---------------------------------------------------------------------------


def smoothed_value(f, x, noise: NoiseBatch) -> float:
    """Plain Monte Carlo estimate of u(x) = E[f(x + delta)]."""
    x = _point(x, noise)
    vals = _eval(f, x[None, :] + noise.draws)
    return float(vals.mean())


def grad_vanilla(f, x, noise: NoiseBatch) -> np.ndarray:
    """mean_k (delta_k / sigma^2) f(x + delta_k); unbiased for grad u."""
    x = _point(x, noise)
    vals = _eval(f, x[None, :] + noise.draws)
    return noise.draws.T @ vals / (noise.sigma**2 * noise.samples)


def grad_cv(f, x, noise: NoiseBatch) -> np.ndarray:
    """Control-variate form with baseline f(x); same expectation as vanilla."""
    x = _point(x, noise)
    vals = _eval(f, x[None, :] + noise.draws)
    f0 = _eval(f, x[None, :])[0]
    return noise.draws.T @ (vals - f0) / (noise.sigma**2 * noise.samples)


def grad_anti(f, x, noise: NoiseBatch) -> np.ndarray:
    """Antithetic pairs: mean_j (delta_j / 2 sigma^2)(f(x+delta_j) - f(x-delta_j))."""
    _require_pairs(noise)
    x = _point(x, noise)
    vals = _eval(f, x[None, :] + noise.draws)
    diff = vals[0::2] - vals[1::2]
    pairs = noise.base
    return pairs.T @ diff / (2.0 * noise.sigma**2 * pairs.shape[0])


def laplacian_vanilla(f, x, noise: NoiseBatch, coords=None) -> float:
    """mean_k ((|delta_k|^2 - sigma^2 d) / sigma^4) f(x + delta_k)."""
    x = _point(x, noise)
    idx = _coord_subset(coords, noise.dim)
    vals = _eval(f, x[None, :] + noise.draws)
    w = _lap_row_factors(noise, idx)
    return float(w @ vals / noise.samples)


def laplacian_cv(f, x, noise: NoiseBatch, coords=None) -> float:
    """Control-variate Laplacian: weights applied to f(x+delta) - f(x)."""
    x = _point(x, noise)
    idx = _coord_subset(coords, noise.dim)
    vals = _eval(f, x[None, :] + noise.draws)
    f0 = _eval(f, x[None, :])[0]
    w = _lap_row_factors(noise, idx)
    return float(w @ (vals - f0) / noise.samples)


def laplacian_anti(f, x, noise: NoiseBatch, coords=None) -> float:
    """Antithetic second difference:

    mean_j ((|delta_j|^2 - sigma^2 d) / 2 sigma^4)
           (f(x+delta_j) + f(x-delta_j) - 2 f(x)).
    """
    _require_pairs(noise)
    x = _point(x, noise)
    idx = _coord_subset(coords, noise.dim)
    vals = _eval(f, x[None, :] + noise.draws)
    f0 = _eval(f, x[None, :])[0]
    second = vals[0::2] + vals[1::2] - 2.0 * f0
    base = noise.base if idx is None else noise.base[:, idx]
    nS = noise.dim if idx is None else idx.size
    s2 = noise.sigma**2
    w = (np.einsum("kd,kd->k", base, base) - s2 * nS) / (2.0 * s2 * s2)
    return float(w @ second / base.shape[0])


def partial_laplacian(f, x, noise: NoiseBatch, coords, variant="vanilla") -> float:
    """Laplacian restricted to the coordinate subset ``coords``.

    Applies the per-coordinate second-derivative identity summed over the
    subset: |delta|^2 becomes |delta_S|^2 and d becomes |S|.
    """
    if coords is None:
        raise ConfigError("coordinate subset must be nonempty")
    if variant == "vanilla":
        return laplacian_vanilla(f, x, noise, coords=coords)
    if variant == "control_variate":
        return laplacian_cv(f, x, noise, coords=coords)
    if variant == "cv_antithetic":
        return laplacian_anti(f, x, noise, coords=coords)
    raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")


def hessian_vanilla(f, x, noise: NoiseBatch) -> np.ndarray:
    """mean_k ((delta_k delta_k^T - sigma^2 I) / sigma^4) f(x + delta_k).

    Symmetric by construction. Guarded to moderate dimensions: above
    HESSIAN_DIM_LIMIT use the Laplacian estimators, which never build the
    d x d matrix.
    """
    x = _point(x, noise)
    d = noise.dim
    if d > HESSIAN_DIM_LIMIT:
        raise CapabilityError(
            f"Hessian estimate materializes {d}x{d} entries (limit "
            f"{HESSIAN_DIM_LIMIT}); use the Laplacian estimators instead"
        )
    vals = _eval(f, x[None, :] + noise.draws)
    s2 = noise.sigma**2
    h = _sym_outer(vals, noise.draws) / (s2 * s2 * noise.samples)
    h[np.diag_indices(d)] -= vals.sum() / (s2 * noise.samples)
    return h


def _sym_outer(coeff, draws):
    """sum_k coeff_k draws_k draws_k^T, exactly symmetric."""
    m = (draws * coeff[:, None]).T @ draws
    m += m.T.copy()
    m *= 0.5
    return m


def lipschitz_bound(sup_f, sigma) -> float:
    """Lipschitz constant of the smoothed model: (F / sigma) sqrt(2 / pi).

    F bounds |f|; a tanh output layer guarantees F <= 1. The bound holds
    for the l2 norm regardless of how complex the base is.
    """
    sup_f = float(sup_f)
    sigma = float(sigma)
    if not (sup_f >= 0.0 and math.isfinite(sup_f)):
        raise ConfigError(f"sup|f| must be a finite nonnegative real, got {sup_f}")
    if not (sigma > 0.0 and math.isfinite(sigma)):
        raise ConfigError(f"sigma must be a positive real, got {sigma}")
    return sup_f / sigma * math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# combined estimates, row weights, and repeat statistics
# ---------------------------------------------------------------------------


@dataclass
class DerivativeEstimate:
    """Value, gradient and Laplacian estimates from one noise batch.

    ``*_variance`` entries are empirical variances *of the estimates*
    (sample variance of the per-draw contributions divided by their
    count). When a Hessian is materialized the Laplacian is its trace, so
    trace(hessian) == laplacian holds by construction.
    """

    value: float
    gradient: np.ndarray
    laplacian: float
    sample_count: int
    value_variance: float
    gradient_variance: np.ndarray
    laplacian_variance: float
    hessian: Optional[np.ndarray] = None


def estimate(f, x, noise: NoiseBatch, variant, coords=None, with_hessian=False):
    """All estimates for one point from a single set of f evaluations."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant == "cv_antithetic":
        _require_pairs(noise)
    if with_hessian and coords is not None:
        raise ConfigError("hessian estimates cover all coordinates; drop coords")
    x = _point(x, noise)
    idx = _coord_subset(coords, noise.dim)
    vals = _eval(f, x[None, :] + noise.draws)
    f0 = None
    if variant != "vanilla":
        f0 = _eval(f, x[None, :])[0]
    s2 = noise.sigma**2

    if variant == "cv_antithetic":
        base = noise.base
        n = base.shape[0]
        val_c = 0.5 * (vals[0::2] + vals[1::2])
        grad_c = base * ((vals[0::2] - vals[1::2]) / (2.0 * s2))[:, None]
        bsel = base if idx is None else base[:, idx]
        nS = noise.dim if idx is None else idx.size
        wpair = (np.einsum("kd,kd->k", bsel, bsel) - s2 * nS) / (2.0 * s2 * s2)
        lap_c = wpair * (vals[0::2] + vals[1::2] - 2.0 * f0)
    else:
        n = noise.samples
        val_c = vals
        fv = vals if variant == "vanilla" else vals - f0
        grad_c = noise.draws * (fv / s2)[:, None]
        lap_c = _lap_row_factors(noise, idx) * fv

    est = DerivativeEstimate(
        value=float(val_c.mean()),
        gradient=grad_c.mean(axis=0),
        laplacian=float(lap_c.mean()),
        sample_count=noise.samples,
        value_variance=_mean_variance(val_c),
        gradient_variance=_mean_variance(grad_c),
        laplacian_variance=_mean_variance(lap_c),
    )
    if with_hessian:
        if noise.dim > HESSIAN_DIM_LIMIT:
            raise CapabilityError(
                f"Hessian estimate materializes {noise.dim}x{noise.dim} entries "
                f"(limit {HESSIAN_DIM_LIMIT}); use the Laplacian estimators instead"
            )
        if variant == "vanilla":
            h = _sym_outer(vals, noise.draws) / (s2 * s2 * noise.samples)
            h[np.diag_indices(noise.dim)] -= vals.sum() / (s2 * noise.samples)
        elif variant == "control_variate":
            fv = vals - f0
            h = _sym_outer(fv, noise.draws) / (s2 * s2 * noise.samples)
            h[np.diag_indices(noise.dim)] -= fv.sum() / (s2 * noise.samples)
        else:
            second = vals[0::2] + vals[1::2] - 2.0 * f0
            h = _sym_outer(second, noise.base) / (2.0 * s2 * s2 * noise.base.shape[0])
            h[np.diag_indices(noise.dim)] -= second.sum() / (2.0 * s2 * noise.base.shape[0])
        est.hessian = h
        est.laplacian = float(np.trace(h))
    return est


def _mean_variance(contrib):
    """Unbiased variance of the mean of the rows of ``contrib``."""
    n = contrib.shape[0]
    if n < 2:
        return np.zeros(contrib.shape[1:]) if contrib.ndim > 1 else 0.0
    v = contrib.var(axis=0, ddof=1) / n
    return v if contrib.ndim > 1 else float(v)


@dataclass(frozen=True)
class RowWeights:
    """Linear-form coefficients of the estimators over one noise batch.

    Every estimate is  sum_k w_k f(x + delta_k) + c * f(x)  for suitable
    weights; exposing them lets a caller turn loss derivatives w.r.t. the
    estimates into cotangents on the raw f evaluations.
    """

    value: np.ndarray  # (K,)
    grad: np.ndarray  # (K, d)
    lap: np.ndarray  # (K,)
    center_grad: np.ndarray  # (d,)
    center_lap: float
    needs_center: bool


def row_weights(noise: NoiseBatch, variant, coords=None) -> RowWeights:
    """Per-row and center coefficients for (value, gradient, Laplacian)."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant == "cv_antithetic":
        _require_pairs(noise)
    idx = _coord_subset(coords, noise.dim)
    k = noise.samples
    s2 = noise.sigma**2
    value_w = np.full(k, 1.0 / k)
    grad_w = noise.draws / (s2 * k)
    lap_w = _lap_row_factors(noise, idx) / k
    if variant == "vanilla":
        center_grad = np.zeros(noise.dim)
        center_lap = 0.0
        needs_center = False
    elif variant == "control_variate":
        center_grad = -grad_w.sum(axis=0)
        center_lap = -float(lap_w.sum())
        needs_center = True
    else:
        # paired rows: gradient center cancels exactly; Laplacian keeps -2f(x) per pair
        center_grad = np.zeros(noise.dim)
        center_lap = -float(lap_w.sum())
        needs_center = True
    return RowWeights(value_w, grad_w, lap_w, center_grad, center_lap, needs_center)


@dataclass
class EstimatorStats:
    """Mean and unbiased variance of repeated estimates (across noise batches)."""

    repeats: int
    value_mean: float
    value_variance: float
    gradient_mean: np.ndarray
    gradient_variance: np.ndarray
    laplacian_mean: float
    laplacian_variance: float


def estimator_stats(f, x, config: SmoothingConfig, repeats, seeds=None, coords=None):
    """Repeat the combined estimate over independent noise batches.

    Repeat r uses substream (config.seed, r) unless explicit ``seeds`` are
    given; duplicate seeds are rejected since identical streams would fake
    a zero-variance estimator.
    """
    repeats = int(repeats)
    if repeats < 2:
        raise ConfigError(f"repeats must be >= 2, got {repeats}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if seeds is not None:
        seeds = [int(s) for s in seeds]
        if len(seeds) != repeats:
            raise ConfigError(f"{len(seeds)} seeds for {repeats} repeats")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("repeat seeds must be distinct (degenerate RNG streams)")
    values = np.empty(repeats)
    grads = np.empty((repeats, x.shape[0]))
    laps = np.empty(repeats)
    for r in range(repeats):
        if seeds is None:
            noise = sample_noise(config, x.shape[0], point_index=0, repeat_index=r)
        else:
            rng = substream(seeds[r])
            noise = _draw(rng, config, x.shape[0])
        est = estimate(f, x, noise, config.variant, coords=coords)
        values[r] = est.value
        grads[r] = est.gradient
        laps[r] = est.laplacian
    return EstimatorStats(
        repeats=repeats,
        value_mean=float(values.mean()),
        value_variance=float(values.var(ddof=1)),
        gradient_mean=grads.mean(axis=0),
        gradient_variance=grads.var(axis=0, ddof=1),
        laplacian_mean=float(laps.mean()),
        laplacian_variance=float(laps.var(ddof=1)),
    )


# ---------------------------------------------------------------------------
# smoothed-model handle
# ---------------------------------------------------------------------------

_VALUE_CHUNK_DOUBLES = 1 << 24  # ~128 MB of perturbed points per chunk


@dataclass
class SmoothedModel:
    """u(x) = E[f(x + delta)] with f a trained network, evaluated by MC.

    The handle is a callable (P, d) -> (P,). Per-point noise is keyed by
    the point's value and the evaluation seed, so results do not depend on
    batching or point order.
    """

    base: object  # callable (B, d) -> (B,)
    smoothing: SmoothingConfig
    dim: int
    seed: Optional[int] = None  # defaults to smoothing.seed

    def values(self, points, seed=None, samples=None) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        if pts.shape[1] != self.dim:
            raise ConfigError(f"points have dim {pts.shape[1]}, model has dim {self.dim}")
        use_seed = self.smoothing.seed if seed is None else seed
        if self.seed is not None and seed is None:
            use_seed = self.seed
        k = self.smoothing.samples if samples is None else int(samples)
        cfg = SmoothingConfig(self.smoothing.sigma, k, self.smoothing.variant, use_seed)
        out = np.empty(pts.shape[0])
        per_chunk = max(1, _VALUE_CHUNK_DOUBLES // (k * self.dim))
        for lo in range(0, pts.shape[0], per_chunk):
            hi = min(lo + per_chunk, pts.shape[0])
            block = np.empty((hi - lo, k, self.dim))
            for i in range(lo, hi):
                block[i - lo] = pts[i] + sample_noise_for_point(cfg, pts[i]).draws
            vals = _eval(self.base, block.reshape(-1, self.dim))
            out[lo:hi] = vals.reshape(hi - lo, k).mean(axis=1)
        return out[0] if single else out

    __call__ = values
