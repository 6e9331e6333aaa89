"""PDE benchmark definitions: domains, residuals, targets, references.

Three problems are built in:

* ``poisson2d`` --  lap u = g on [0,1]^2, u = h on the boundary, with
  g(x) = -sin(x1 + x2) and exact solution u*(x) = sin(x1 + x2) / 2.
* ``heat`` -- u_t = lap_x u on B(0,1) x (0,1) in N spatial dimensions,
  u(x,0) = |x|^2 / 2N, u = t + 1/2N on the spatial boundary; exact
  solution u*(x,t) = t + |x|^2 / 2N.
* ``hjb`` -- u_t + lap_x u - mu |grad_x u|^2 = 0 on R^N x [0,T] with
  terminal condition u(x,T) = g(x) = ln((1 + |x|^2)/2); the reference is
  the Cole-Hopf expectation u(x,t) = -(1/mu) ln E_y[exp(-mu g(x -
  sqrt(2(T-t)) y))], estimated by Monte Carlo with a reported standard
  error.

Inputs of time-dependent problems are laid out (x_1 .. x_N, t): the time
coordinate is the last column.

Residuals and losses are assembled from the shared estimator row-weight
machinery, so one set of base-network evaluations per collocation point
serves the value, gradient, and Laplacian terms simultaneously.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, NumericError
from .estimators import SmoothingConfig, sample_noise_for_point, substream

PROBLEM_NAMES = ("poisson2d", "heat", "hjb")

# Default Monte Carlo sample count for the HJB reference solution.
HJB_REFERENCE_SAMPLES = 1 << 22
HJB_REFERENCE_SE_TARGET = 1e-3


@dataclass(frozen=True)
class ProblemSpec:
    """One PDE benchmark: domain dimensions, loss weights, batch sizes."""

    name: str
    dim: int  # spatial dimension
    horizon: float = 1.0  # T, time-dependent problems only
    mu: float = 1.0  # HJB nonlinearity coefficient
    loss_weights: Mapping[str, float] = field(default_factory=dict)
    batch_sizes: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in PROBLEM_NAMES:
            raise ConfigError(f"problem must be one of {PROBLEM_NAMES}, got {self.name!r}")
        if self.dim < 1:
            raise ConfigError(f"spatial dimension must be >= 1, got {self.dim}")
        if self.name == "poisson2d" and self.dim != 2:
            raise ConfigError("poisson2d is a 2-dimensional problem")
        if self.name != "poisson2d" and self.horizon <= 0:
            raise ConfigError(f"time horizon must be positive, got {self.horizon}")
        for term, w in self.loss_weights.items():
            if w <= 0:
                raise ConfigError(f"loss weight {term} must be positive, got {w}")
        for term, n in self.batch_sizes.items():
            if n < 1:
                raise ConfigError(f"batch size {term} must be >= 1, got {n}")
        missing = [t for t in self.condition_terms if t not in self.loss_weights]
        if missing:
            raise ConfigError(f"missing loss weights for terms {missing}")
        needed = ["interior"] + list(self.condition_terms)
        missing = [t for t in needed if t not in self.batch_sizes]
        if missing:
            raise ConfigError(f"missing batch sizes for terms {missing}")

    @property
    def input_dim(self) -> int:
        return self.dim if self.name == "poisson2d" else self.dim + 1

    @property
    def time_dependent(self) -> bool:
        return self.name != "poisson2d"

    @property
    def spatial_coords(self):
        return tuple(range(self.dim))

    @property
    def condition_terms(self) -> tuple[str, ...]:
        if self.name == "poisson2d":
            return ("boundary",)
        if self.name == "heat":
            return ("initial", "boundary")
        return ("terminal",)

    @property
    def reference_kind(self) -> str:
        return "monte_carlo" if self.name == "hjb" else "closed_form"


def poisson2d(boundary_weight=300.0, interior_batch=100, boundary_batch=100):
    return ProblemSpec(
        "poisson2d",
        dim=2,
        loss_weights={"boundary": float(boundary_weight)},
        batch_sizes={"interior": int(interior_batch), "boundary": int(boundary_batch)},
    )


def heat(
    dim=100,
    horizon=1.0,
    initial_weight=1000.0,
    boundary_weight=1000.0,
    interior_batch=50,
    initial_batch=50,
    boundary_batch=50,
):
    return ProblemSpec(
        "heat",
        dim=int(dim),
        horizon=float(horizon),
        loss_weights={"initial": float(initial_weight), "boundary": float(boundary_weight)},
        batch_sizes={
            "interior": int(interior_batch),
            "initial": int(initial_batch),
            "boundary": int(boundary_batch),
        },
    )


def hjb(dim=250, horizon=1.0, mu=1.0, terminal_weight=500.0, interior_batch=50, terminal_batch=50):
    return ProblemSpec(
        "hjb",
        dim=int(dim),
        horizon=float(horizon),
        mu=float(mu),
        loss_weights={"terminal": float(terminal_weight)},
        batch_sizes={"interior": int(interior_batch), "terminal": int(terminal_batch)},
    )


def make_problem(name, **kwargs) -> ProblemSpec:
    factory = {"poisson2d": poisson2d, "heat": heat, "hjb": hjb}.get(name)
    if factory is None:
        raise ConfigError(f"problem must be one of {PROBLEM_NAMES}, got {name!r}")
    return factory(**kwargs)


# ---------------------------------------------------------------------------
# forcing terms, condition targets, references
# ---------------------------------------------------------------------------


def poisson_forcing(points) -> np.ndarray:
    """g(x) = -sin(x1 + x2)."""
    pts = np.asarray(points)
    return -np.sin(pts[:, 0] + pts[:, 1])


def hjb_terminal_cost(x) -> np.ndarray:
    """g(x) = ln((1 + |x|^2) / 2)."""
    x = np.asarray(x)
    return np.log1p(np.einsum("bd,bd->b", x, x)) - math.log(2.0)


def condition_target(problem: ProblemSpec, term, points) -> np.ndarray:
    """Target value of the boundary/initial/terminal condition at ``points``."""
    pts = np.asarray(points, dtype=np.float64)
    if problem.name == "poisson2d":
        if term != "boundary":
            raise ConfigError(f"poisson2d has no condition term {term!r}")
        return 0.5 * np.sin(pts[:, 0] + pts[:, 1])
    if problem.name == "heat":
        x = pts[:, :-1]
        if term == "initial":
            return np.einsum("bd,bd->b", x, x) / (2.0 * problem.dim)
        if term == "boundary":
            return pts[:, -1] + 1.0 / (2.0 * problem.dim)
        raise ConfigError(f"heat has no condition term {term!r}")
    if term != "terminal":
        raise ConfigError(f"hjb has no condition term {term!r}")
    return hjb_terminal_cost(pts[:, :-1])


@dataclass(frozen=True)
class ReferenceSolution:
    """How reference values are produced for one problem."""

    kind: str  # closed_form | monte_carlo
    mc_samples: int = HJB_REFERENCE_SAMPLES
    se_target: float = HJB_REFERENCE_SE_TARGET

    def __post_init__(self):
        if self.kind not in ("closed_form", "monte_carlo"):
            raise ConfigError(f"unknown reference kind {self.kind!r}")


def reference_value(problem: ProblemSpec, points, seed=0, reference: ReferenceSolution = None):
    """Reference solution u*(point) with a standard error for MC references.

    Returns ``(values, se)``; ``se`` is None for closed forms.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.shape[1] != problem.input_dim:
        raise ConfigError(f"points have dim {pts.shape[1]}, problem needs {problem.input_dim}")
    if problem.name == "poisson2d":
        vals = 0.5 * np.sin(pts[:, 0] + pts[:, 1])
        se = None
    elif problem.name == "heat":
        x = pts[:, :-1]
        vals = pts[:, -1] + np.einsum("bd,bd->b", x, x) / (2.0 * problem.dim)
        se = None
    else:
        reference = reference or ReferenceSolution("monte_carlo")
        root = seed if isinstance(seed, tuple) else (seed,)
        vals = np.empty(pts.shape[0])
        se = np.empty(pts.shape[0])
        for i in range(pts.shape[0]):
            vals[i], se[i] = _hjb_reference_point(
                problem, pts[i, :-1], pts[i, -1], seed=root + (i,), reference=reference
            )
    if single:
        return (float(vals[0]), None if se is None else float(se[0]))
    return vals, se


_HJB_MC_CHUNK = 1 << 19


def _hjb_reference_point(problem, x, t, seed, reference):
    """Cole-Hopf Monte Carlo: u = -(1/mu) ln E_y[ exp(-mu g(x - sqrt(2(T-t)) y)) ].

    At t = T the kernel has zero width and the terminal cost is returned
    exactly. Otherwise Z = exp(-mu g(w)) = ((1 + |w|^2)/2)^(-mu) is
    averaged in chunks; the standard error of u follows from the delta
    method, se_u = se_Z / (mu mean_Z).
    """
    tau = problem.horizon - float(t)
    if tau < 0:
        raise ConfigError(f"time {t} beyond horizon {problem.horizon}")
    if tau == 0.0:
        return float(hjb_terminal_cost(np.asarray(x)[None, :])[0]), 0.0
    rng = substream(*(seed if isinstance(seed, tuple) else (seed,)))
    scale = math.sqrt(2.0 * tau)
    n = int(reference.mc_samples)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n:
        m = min(_HJB_MC_CHUNK, n - done)
        y = rng.standard_normal((m, problem.dim))
        w = x[None, :] - scale * y
        z = np.exp(-problem.mu * (np.log1p(np.einsum("bd,bd->b", w, w)) - math.log(2.0)))
        total += z.sum()
        total_sq += (z * z).sum()
        done += m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    se_mean = math.sqrt(var / n)
    value = -math.log(mean) / problem.mu
    se_value = se_mean / (problem.mu * mean)
    if se_value > reference.se_target:
        warnings.warn(
            f"HJB reference SE {se_value:.2e} above target {reference.se_target:.0e} "
            f"with {n} samples; increase mc_samples",
            stacklevel=2,
        )
    return value, se_value


# ---------------------------------------------------------------------------
# collocation sampling
# ---------------------------------------------------------------------------


@dataclass
class CollocationBatch:
    """Sampled interior / condition points for one loss evaluation."""

    interior: np.ndarray
    conditions: dict[str, np.ndarray]

    @property
    def boundary(self) -> Optional[np.ndarray]:
        if "boundary" in self.conditions:
            return self.conditions["boundary"]
        return self.conditions.get("terminal")

    @property
    def initial(self) -> Optional[np.ndarray]:
        return self.conditions.get("initial")


def _uniform_ball(rng, n, dim):
    """Exact uniform sampling of the unit ball: Gaussian direction, U^(1/N) radius."""
    x = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=n) ** (1.0 / dim)
    return x * r[:, None]


def _uniform_sphere(rng, n, dim):
    x = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x


def sample_batch(problem: ProblemSpec, seed) -> CollocationBatch:
    """Draw one i.i.d. collocation batch from the problem's samplers."""
    rng = substream(*(seed if isinstance(seed, tuple) else (seed,)))
    n1 = problem.batch_sizes["interior"]
    if problem.name == "poisson2d":
        interior = rng.uniform(0.0, 1.0, size=(n1, 2))
        n2 = problem.batch_sizes["boundary"]
        edge = rng.integers(0, 4, size=n2)
        pos = rng.uniform(0.0, 1.0, size=n2)
        boundary = np.empty((n2, 2))
        boundary[:, 0] = np.where(edge < 2, pos, np.where(edge == 2, 0.0, 1.0))
        boundary[:, 1] = np.where(edge >= 2, pos, np.where(edge == 0, 0.0, 1.0))
        return CollocationBatch(interior, {"boundary": boundary})
    if problem.name == "heat":
        x = _uniform_ball(rng, n1, problem.dim)
        t = rng.uniform(0.0, problem.horizon, size=(n1, 1))
        interior = np.hstack([x, t])
        n2 = problem.batch_sizes["initial"]
        initial = np.hstack([_uniform_ball(rng, n2, problem.dim), np.zeros((n2, 1))])
        n3 = problem.batch_sizes["boundary"]
        tb = rng.uniform(0.0, problem.horizon, size=(n3, 1))
        boundary = np.hstack([_uniform_sphere(rng, n3, problem.dim), tb])
        return CollocationBatch(interior, {"initial": initial, "boundary": boundary})
    # hjb: x ~ N(0, I), t ~ U(0, T); terminal points at t = T exactly
    x = rng.standard_normal((n1, problem.dim))
    t = rng.uniform(0.0, problem.horizon, size=(n1, 1))
    interior = np.hstack([x, t])
    n2 = problem.batch_sizes["terminal"]
    xt = rng.standard_normal((n2, problem.dim))
    terminal = np.hstack([xt, np.full((n2, 1), problem.horizon)])
    return CollocationBatch(interior, {"terminal": terminal})


def sample_eval_points(problem: ProblemSpec, seed, n) -> np.ndarray:
    """Hold-out evaluation points, drawn from the problem's own measure."""
    rng = substream(*(seed if isinstance(seed, tuple) else (seed,)))
    n = int(n)
    if problem.name == "poisson2d":
        return rng.uniform(0.0, 1.0, size=(n, 2))
    if problem.name == "heat":
        x = _uniform_ball(rng, n, problem.dim)
        t = rng.uniform(0.0, problem.horizon, size=(n, 1))
        return np.hstack([x, t])
    x = rng.standard_normal((n, problem.dim))
    t = rng.uniform(0.0, problem.horizon, size=(n, 1))
    return np.hstack([x, t])


# ---------------------------------------------------------------------------
# residual assembly
# ---------------------------------------------------------------------------


def residual_partials(problem: ProblemSpec, grads, laps, points):
    """Interior residual r and its partials w.r.t. the estimates.

    ``grads`` is (P, input_dim), ``laps`` holds the (spatial) Laplacian
    estimates. Returns (r, dr/dgrad, dr/dlap) with matching shapes.
    """
    p = grads.shape[0]
    if problem.name == "poisson2d":
        r = laps - poisson_forcing(points)
        dgrad = np.zeros_like(grads)
        dlap = np.ones(p)
        return r, dgrad, dlap
    t_idx = problem.input_dim - 1
    if problem.name == "heat":
        r = grads[:, t_idx] - laps
        dgrad = np.zeros_like(grads)
        dgrad[:, t_idx] = 1.0
        dlap = -np.ones(p)
        return r, dgrad, dlap
    gx = grads[:, : problem.dim]
    r = grads[:, t_idx] + laps - problem.mu * np.einsum("bd,bd->b", gx, gx)
    dgrad = np.zeros_like(grads)
    dgrad[:, t_idx] = 1.0
    dgrad[:, : problem.dim] = -2.0 * problem.mu * gx
    dlap = np.ones(p)
    return r, dgrad, dlap


def interior_coords(problem: ProblemSpec):
    """Coordinates the residual's Laplacian acts on (None = all)."""
    return None if problem.name == "poisson2d" else problem.spatial_coords


class StackedWeights:
    """Estimator coefficients for a block of points, stacked for einsums.

    Every estimate over the block is a contraction with the base
    evaluations: for point p,

        grad[p] = sum_k (draws[p,k,:] / sigma^2 K) f_rows[p,k] + center_grad[p] f0[p]
        lap[p]  = sum_k lap_w[p,k] f_rows[p,k]                 + center_lap[p]  f0[p]
        value[p] = mean_k f_rows[p,k]

    The gradient weights stay in ``draws`` (scale folded into the
    contraction) so no second (P, K, d) array is materialized.
    """

    __slots__ = ("draws", "lap_w", "center_grad", "center_lap", "needs_center", "_gscale")

    def __init__(self, draws, variant, sigma, coords=None):
        self.draws = draws  # (P, K, d)
        p, k, d = draws.shape
        s2 = sigma * sigma
        self._gscale = 1.0 / (s2 * k)
        if coords is not None and len(coords) == d:
            coords = None  # full coverage: identical to the unrestricted weights
        sel = draws if coords is None else draws[:, :, coords]
        n_s = d if coords is None else len(coords)
        self.lap_w = (np.einsum("pkd,pkd->pk", sel, sel) - s2 * n_s) / (s2 * s2 * k)
        self.needs_center = variant != "vanilla"
        if variant == "control_variate":
            self.center_grad = draws.sum(axis=1) * (-self._gscale)
            self.center_lap = -self.lap_w.sum(axis=1)
        elif variant == "cv_antithetic":
            # paired rows: the gradient baseline cancels exactly
            self.center_grad = np.zeros((p, d))
            self.center_lap = -self.lap_w.sum(axis=1)
        else:
            self.center_grad = np.zeros((p, d))
            self.center_lap = np.zeros(p)

    def estimates(self, f_rows, f_centers):
        grads = np.matmul(f_rows[:, None, :], self.draws)[:, 0, :]
        grads *= self._gscale
        laps = np.einsum("pk,pk->p", self.lap_w, f_rows)
        if self.needs_center:
            grads += self.center_grad * f_centers[:, None]
            laps += self.center_lap * f_centers
        return grads, laps

    def row_coefficients(self, dgrad, dlap):
        """Per-row and center coefficients of dgrad . grad + dlap * lap."""
        beta = np.matmul(self.draws, dgrad[:, :, None])[:, :, 0]
        beta *= self._gscale
        beta += dlap[:, None] * self.lap_w
        beta0 = None
        if self.needs_center:
            beta0 = np.einsum("pd,pd->p", self.center_grad, dgrad) + dlap * self.center_lap
        return beta, beta0


def noise_block(points, config: SmoothingConfig, repeat_index=0) -> np.ndarray:
    """(P, K, d) noise draws, one value-keyed batch per point."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ConfigError("points must form a (P, d) matrix")
    p, d = pts.shape
    draws = np.empty((p, config.samples, d))
    for i in range(p):
        draws[i] = sample_noise_for_point(config, pts[i], repeat_index).draws
    return draws


class PointEstimates:
    """Per-point estimates plus the weights needed for cotangents."""

    __slots__ = ("points", "weights", "f_rows", "f_centers", "values", "grads", "laps")

    def __init__(self, points, weights, f_rows, f_centers):
        self.points = points
        self.weights = weights
        self.f_rows = f_rows  # (P, K)
        self.f_centers = f_centers  # (P,) or None
        self.values = f_rows.mean(axis=1)
        self.grads, self.laps = weights.estimates(f_rows, f_centers)


def point_estimates(f, points, config: SmoothingConfig, coords=None, repeat_index=0):
    """Estimate (value, gradient, Laplacian) for every point in one pass.

    One noise batch per point (keyed by the point's value and
    ``repeat_index``) is shared by all three estimates. The base f is
    evaluated once on all perturbed points plus, for the variance-reduced
    variants, the centers.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ConfigError("points must form a (P, d) matrix")
    draws = noise_block(pts, config, repeat_index)
    weights = StackedWeights(draws, config.variant, config.sigma, coords=coords)
    eval_pts = perturbed_rows(pts, draws, weights.needs_center)
    fv = np.asarray(f(eval_pts), dtype=np.float64).reshape(-1)
    if fv.shape[0] != eval_pts.shape[0]:
        raise ConfigError("base function returned the wrong number of values")
    p, k, _ = draws.shape
    if not np.isfinite(fv).all():
        bad = int(np.flatnonzero(~np.isfinite(fv))[0])
        raise NumericError(
            f"non-finite base value at evaluation row {bad} (point {bad // k if bad < p * k else 'center'})"
        )
    f_rows = fv[: p * k].reshape(p, k)
    f_centers = fv[p * k :] if weights.needs_center else None
    return PointEstimates(pts, weights, f_rows, f_centers)


def perturbed_rows(points, draws, include_centers):
    """Flattened evaluation points: x_p + delta_pk rows, then centers."""
    p, k, d = draws.shape
    rows = (points[:, None, :] + draws).reshape(p * k, d)
    if include_centers:
        return np.vstack([rows, points])
    return rows


def residual(problem: ProblemSpec, f, batch: CollocationBatch, config: SmoothingConfig, repeat_index=0):
    """Interior PDE residual estimates, one value per interior point."""
    est = point_estimates(f, batch.interior, config, coords=interior_coords(problem), repeat_index=repeat_index)
    r, _, _ = residual_partials(problem, est.grads, est.laps, est.points)
    if not np.isfinite(r).all():
        bad = int(np.flatnonzero(~np.isfinite(r))[0])
        raise NumericError(f"non-finite interior residual at point {bad}")
    return r


def boundary_residual(problem: ProblemSpec, f, batch: CollocationBatch, config: SmoothingConfig, repeat_index=0):
    """Condition residuals u_hat(point) - target(point), one array per term."""
    out = {}
    for term in problem.condition_terms:
        pts = batch.conditions[term]
        est = point_estimates(f, pts, config, repeat_index=repeat_index)
        vals = est.values - condition_target(problem, term, pts)
        if not np.isfinite(vals).all():
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise NumericError(f"non-finite {term} residual at point {bad}")
        out[term] = vals
    return out


def aggregate_loss(interior_residuals, condition_residuals, loss_weights):
    """Mean-square aggregation: mean(r^2) + sum_term w_term mean(b_term^2)."""
    breakdown = {"interior": float(np.mean(np.square(interior_residuals)))}
    for term, vals in condition_residuals.items():
        breakdown[term] = float(loss_weights[term]) * float(np.mean(np.square(vals)))
    return float(sum(breakdown.values())), breakdown


def total_loss(problem: ProblemSpec, f, batch: CollocationBatch, config: SmoothingConfig, repeat_index=0):
    """Estimated physics loss with a per-term breakdown (weights applied)."""
    r = residual(problem, f, batch, config, repeat_index=repeat_index)
    conds = boundary_residual(problem, f, batch, config, repeat_index=repeat_index)
    return aggregate_loss(r, conds, problem.loss_weights)
