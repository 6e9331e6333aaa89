"""End-to-end optimization of the smoothed model.

One training iteration is: sample a collocation batch, optionally push
interior points toward high-residual regions (adversarial refinement),
evaluate the estimated physics loss from forward passes of the base
network only, back-propagate once to the parameters, and apply a
bias-corrected Adam update with a linearly decaying learning rate.

The loss is a quadratic form in the per-point derivative estimates, and
every estimate is a fixed linear form in the base-network evaluations
once the noise is drawn. The parameter gradient therefore needs exactly
one reverse pass: the chain rule turns the loss derivatives w.r.t. the
estimates into scalar cotangents on each evaluated point.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import evaluation, network, problems
from .errors import ConfigError, NumericError
from .estimators import SmoothingConfig, substream, substream_seed
from .network import NetworkSpec, ParamSet, init_params, value_and_pullback, zeros_like
from .problems import CollocationBatch, ProblemSpec, interior_coords, residual_partials, sample_batch

LR_SCHEDULES = ("linear_to_zero", "constant")

# Evaluation rows processed per fused forward/backward group.
GROUP_ROWS = 1 << 16

# Interior points whose norm exceeds this after refinement are re-sampled.
DIVERGENCE_NORM = 1e3

EVAL_POINTS_DEFAULT = {"poisson2d": 10_000, "heat": 10_000, "hjb": 1_000}


@dataclass(frozen=True)
class AdversarialConfig:
    """Inner-loop ascent on the squared interior residual."""

    inner_iterations: int = 20
    step_size: float = 0.05
    gradient: str = "exact"  # "exact" (input gradients) or "fd" (central differences)
    fd_step: float = 1e-3
    samples: Optional[int] = None  # noise rows per point for the inner loop

    def __post_init__(self):
        if self.inner_iterations < 0:
            raise ConfigError("inner_iterations must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.gradient not in ("exact", "fd"):
            raise ConfigError(f"unknown inner gradient mode {self.gradient!r}")
        if self.samples is not None and self.samples < 1:
            raise ConfigError("inner-loop samples must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    learning_rate: float
    smoothing: SmoothingConfig
    lr_schedule: str = "linear_to_zero"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    adversarial: Optional[AdversarialConfig] = None
    seed: int = 0
    eval_points: Optional[int] = None  # None: per-problem default; 0: skip final eval
    eval_samples: Optional[int] = None  # None: smoothing.samples
    reference_samples: Optional[int] = None  # HJB reference MC budget per point
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise ConfigError("Adam betas must lie in (0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError("Adam epsilon must be positive")

    def learning_rate_at(self, iteration) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * (1.0 - iteration / self.iterations)


@dataclass
class AdamState:
    first_moment: ParamSet
    second_moment: ParamSet
    step_count: int = 0


def init_adam(params: ParamSet) -> AdamState:
    return AdamState(zeros_like(params), zeros_like(params), 0)


def adam_step(state: AdamState, grad: ParamSet, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam; returns (parameter delta, new state)."""
    t = state.step_count + 1
    m = state.first_moment.map(lambda m_, g: beta1 * m_ + (1.0 - beta1) * g, grad)
    v = state.second_moment.map(lambda v_, g: beta2 * v_ + (1.0 - beta2) * g * g, grad)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    delta = m.map(lambda m_, v_: -lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps), v)
    return delta, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# fused loss + parameter gradient
# ---------------------------------------------------------------------------


def _point_group_size(samples):
    rows_per_point = samples + 1
    return max(1, GROUP_ROWS // rows_per_point)


def _interior_term(problem, params, points, config, grad, repeat_index=0):
    """Interior mean-square residual; accumulates parameter cotangents into ``grad``."""
    coords = interior_coords(problem)
    n1 = points.shape[0]
    k = config.samples
    res_all = np.empty(n1)
    group = _point_group_size(k)
    for lo in range(0, n1, group):
        hi = min(lo + group, n1)
        pts = points[lo:hi]
        p = hi - lo
        draws = problems.noise_block(pts, config, repeat_index)
        weights = problems.StackedWeights(draws, config.variant, config.sigma, coords=coords)
        eval_pts = problems.perturbed_rows(pts, draws, weights.needs_center)
        fv, pullback = value_and_pullback(params, eval_pts)
        if not np.isfinite(fv).all():
            raise NumericError("non-finite base value inside the interior term")
        f_rows = fv[: p * k].reshape(p, k)
        f_centers = fv[p * k :] if weights.needs_center else None
        grads, laps = weights.estimates(f_rows, f_centers)
        r, dgrad, dlap = residual_partials(problem, grads, laps, pts)
        res_all[lo:hi] = r
        if grad is None:
            continue
        scale = 2.0 * r / n1  # d(mean r^2)/dr
        beta, beta0 = weights.row_coefficients(dgrad, dlap)
        beta *= scale[:, None]
        cot = beta.reshape(-1)
        if weights.needs_center:
            cot = np.concatenate([cot, scale * beta0])
        pullback(cot, grad)
    return res_all


def _condition_term(problem, params, term, points, config, grad, repeat_index=0):
    """One value-matching term; accumulates cotangents into ``grad``."""
    n = points.shape[0]
    k = config.samples
    weight = problem.loss_weights[term]
    target = problems.condition_target(problem, term, points)
    vals_all = np.empty(n)
    group = max(1, GROUP_ROWS // k)
    for lo in range(0, n, group):
        hi = min(lo + group, n)
        pts = points[lo:hi]
        p = hi - lo
        draws = problems.noise_block(pts, config, repeat_index)
        rows = problems.perturbed_rows(pts, draws, include_centers=False)
        fv, pullback = value_and_pullback(params, rows)
        if not np.isfinite(fv).all():
            raise NumericError(f"non-finite base value inside the {term} term")
        u_hat = fv.reshape(p, k).mean(axis=1)
        b = u_hat - target[lo:hi]
        vals_all[lo:hi] = b
        if grad is None:
            continue
        cot = np.repeat(2.0 * weight * b / (n * k), k)
        pullback(cot, grad)
    return vals_all


def loss_and_param_grad(problem: ProblemSpec, params: ParamSet, batch: CollocationBatch,
                        smoothing: SmoothingConfig, compute_grad=True, repeat_index=0):
    """Estimated physics loss and its exact parameter gradient.

    The gradient is the reverse-mode derivative of the realized Monte
    Carlo loss with the noise held fixed, so it matches finite
    differences of this same function over the parameters.

    Returns ``(loss, breakdown, grad)`` with ``grad`` None when
    ``compute_grad`` is false.
    """
    grad = zeros_like(params) if compute_grad else None
    r = _interior_term(problem, params, batch.interior, smoothing, grad, repeat_index)
    conds = {}
    for term in problem.condition_terms:
        conds[term] = _condition_term(
            problem, params, term, batch.conditions[term], smoothing, grad, repeat_index
        )
    loss, breakdown = problems.aggregate_loss(r, conds, problem.loss_weights)
    return loss, breakdown, grad


# ---------------------------------------------------------------------------
# adversarial collocation refinement
# ---------------------------------------------------------------------------


def _frozen_residual(problem, params, points, draws, weights, want_grad=True):
    """Residual r(x) under frozen noise and, optionally, grad_x r(x).

    With frozen draws the residual depends on x only through base
    evaluations at x + delta_k (and x itself for the baselines), so

        grad_x r = sum_k beta_k grad f(x + delta_k) + beta_0 grad f(x),

    with beta the same coefficients that serve as loss cotangents. One
    forward pass provides both r and, via an input pullback, its
    coordinate gradient.
    """
    p, d = points.shape
    k = draws.shape[1]
    eval_pts = problems.perturbed_rows(points, draws, weights.needs_center)
    if want_grad:
        fv, pull = network.value_and_input_pullback(params, eval_pts)
    else:
        fv = network.forward(params, eval_pts)
    f_rows = fv[: p * k].reshape(p, k)
    f_centers = fv[p * k :] if weights.needs_center else None
    grads, laps = weights.estimates(f_rows, f_centers)
    r, dgrad, dlap = residual_partials(problem, grads, laps, points)
    if not want_grad:
        return r, None
    beta, beta0 = weights.row_coefficients(dgrad, dlap)
    cot = beta.reshape(-1)
    if weights.needs_center:
        cot = np.concatenate([cot, beta0])
    per_row = pull(cot)
    coord_grad = per_row[: p * k].reshape(p, k, d).sum(axis=1)
    if weights.needs_center:
        coord_grad += per_row[p * k :]
    return r, coord_grad


def _fd_coord_grad(problem, params, points, draws, weights, step):
    """Central finite differences of the frozen-noise residual per coordinate."""
    p, d = points.shape
    out = np.empty((p, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        rp, _ = _frozen_residual(problem, params, points + e, draws, weights, want_grad=False)
        rm, _ = _frozen_residual(problem, params, points - e, draws, weights, want_grad=False)
        out[:, j] = (rp - rm) / (2.0 * step)
    return out


def adversarial_refine(problem: ProblemSpec, params: ParamSet, batch: CollocationBatch,
                       smoothing: SmoothingConfig, inner: AdversarialConfig, seed=0):
    """Gradient ascent of interior points on their squared residual.

    Noise is drawn once for the starting points and frozen across the
    inner iterations (``inner.samples`` rows per point when set). The
    time coordinate is clamped to [0, horizon]; points whose norm exceeds
    DIVERGENCE_NORM are re-sampled from the interior distribution.
    Condition points are returned unchanged.
    """
    if problem.name != "hjb":
        raise ConfigError("adversarial refinement is defined for the hjb problem")
    if inner.inner_iterations == 0:
        return batch, 0
    pts = batch.interior.copy()
    config = smoothing
    if inner.samples is not None and inner.samples != smoothing.samples:
        config = dataclasses.replace(smoothing, samples=inner.samples)
    draws = problems.noise_block(pts, config, repeat_index=0)
    weights = problems.StackedWeights(
        draws, config.variant, config.sigma, coords=interior_coords(problem)
    )
    resampled = 0
    rng = substream(seed, 0xAD)
    for _ in range(inner.inner_iterations):
        if inner.gradient == "exact":
            r, cg = _frozen_residual(problem, params, pts, draws, weights)
        else:
            cg = _fd_coord_grad(problem, params, pts, draws, weights, inner.fd_step)
            r, _ = _frozen_residual(problem, params, pts, draws, weights, want_grad=False)
        pts += inner.step_size * (2.0 * r)[:, None] * cg  # ascent on r^2
        np.clip(pts[:, -1], 0.0, problem.horizon, out=pts[:, -1])
        norms = np.linalg.norm(pts, axis=1)
        bad = np.flatnonzero(~np.isfinite(norms) | (norms > DIVERGENCE_NORM))
        if bad.size:
            resampled += bad.size
            fresh_x = rng.standard_normal((bad.size, problem.dim))
            fresh_t = rng.uniform(0.0, problem.horizon, size=(bad.size, 1))
            pts[bad] = np.hstack([fresh_x, fresh_t])
    return CollocationBatch(pts, batch.conditions), resampled


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class IterationRow:
    iteration: int
    loss: float
    terms: dict
    learning_rate: float
    seconds: float


@dataclass
class RunReport:
    rows: list = field(default_factory=list)
    final_l1: float = float("nan")
    final_l2: float = float("nan")
    final_l1_uncertainty: Optional[float] = None
    eval_points: int = 0
    reference_kind: str = ""
    total_seconds: float = 0.0
    seed: int = 0
    config_echo: dict = field(default_factory=dict)
    aborted: bool = False
    abort_reason: str = ""
    resampled_points: int = 0

    def loss_history(self) -> np.ndarray:
        return np.asarray([row.loss for row in self.rows])

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "seed": self.seed,
            "config": self.config_echo,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "total_seconds": self.total_seconds,
            "resampled_points": self.resampled_points,
            "final": {
                "l1_relative": self.final_l1,
                "l2_relative": self.final_l2,
                "l1_uncertainty": self.final_l1_uncertainty,
                "eval_points": self.eval_points,
                "reference_kind": self.reference_kind,
            },
            "iterations": [
                {
                    "iteration": row.iteration,
                    "loss": row.loss,
                    "learning_rate": row.learning_rate,
                    "seconds": row.seconds,
                    **{f"loss_{k}": v for k, v in row.terms.items()},
                }
                for row in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def train(problem: ProblemSpec, net_spec: NetworkSpec, config: TrainConfig,
          checkpoint_dir=None, progress=None, wall_clock_budget=None):
    """Run the full optimization; returns (final params, RunReport).

    Substream layout (all rooted at config.seed): 0 parameter init,
    (1, i) collocation batch of iteration i, (2, i) estimator noise of
    iteration i, (3, i) adversarial refinement, 4 final evaluation.

    A non-finite loss aborts the run; the last finite-loss parameters are
    kept (and checkpointed when ``checkpoint_dir`` is given). An optional
    ``wall_clock_budget`` (seconds) stops the loop early, marking the
    report aborted.
    """
    if net_spec.input_dim != problem.input_dim:
        raise ConfigError(
            f"network input dim {net_spec.input_dim} != problem dim {problem.input_dim}"
        )
    params = init_params(net_spec, seed=substream_seed(config.seed, 0))
    state = init_adam(params)
    report = RunReport(seed=config.seed)
    last_good = (params, 0)
    t_start = time.perf_counter()
    for it in range(config.iterations):
        t0 = time.perf_counter()
        lr = config.learning_rate_at(it)
        batch = sample_batch(problem, (config.seed, 1, it))
        smoothing_it = dataclasses.replace(
            config.smoothing, seed=substream_seed(config.seed, 2, it)
        )
        if config.adversarial is not None and config.adversarial.inner_iterations > 0:
            adv_smoothing = dataclasses.replace(
                config.smoothing, seed=substream_seed(config.seed, 3, it)
            )
            batch, resampled = adversarial_refine(
                problem, params, batch, adv_smoothing, config.adversarial,
                seed=substream_seed(config.seed, 3, it),
            )
            report.resampled_points += resampled
        try:
            loss, terms, grad = loss_and_param_grad(problem, params, batch, smoothing_it)
        except NumericError as exc:
            report.aborted = True
            report.abort_reason = f"iteration {it}: {exc}"
            break
        if not np.isfinite(loss):
            bad_terms = [k for k, v in terms.items() if not np.isfinite(v)]
            report.aborted = True
            report.abort_reason = f"iteration {it}: non-finite loss (terms: {bad_terms})"
            break
        last_good = (params, it)
        delta, state = adam_step(
            state, grad, lr, config.adam_beta1, config.adam_beta2, config.adam_epsilon
        )
        params = params.map(lambda p, d_: p + d_, delta)
        report.rows.append(IterationRow(it, loss, terms, lr, time.perf_counter() - t0))
        if checkpoint_dir is not None and config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(_ckpt_path(checkpoint_dir), net_spec, params, state, it + 1)
        if progress is not None:
            progress(it, loss, terms)
        if wall_clock_budget is not None and time.perf_counter() - t_start > wall_clock_budget:
            if it + 1 < config.iterations:
                report.aborted = True
                report.abort_reason = f"wall clock budget exhausted after iteration {it}"
            break
    if report.aborted and "budget" not in report.abort_reason:
        params, _ = last_good  # keep the last parameters that produced a finite loss
    if checkpoint_dir is not None:
        save_checkpoint(_ckpt_path(checkpoint_dir), net_spec, params, state, len(report.rows))
    report.total_seconds = time.perf_counter() - t_start
    eval_points = config.eval_points
    if eval_points is None:
        eval_points = EVAL_POINTS_DEFAULT[problem.name]
    if eval_points and not report.aborted:
        err = evaluation.relative_errors(
            evaluation.model_handle(params, config.smoothing),
            problem,
            eval_seed=substream_seed(config.seed, 4),
            num_points=eval_points,
            eval_samples=config.eval_samples,
            reference_samples=config.reference_samples,
        )
        report.final_l1 = err.l1_relative
        report.final_l2 = err.l2_relative
        report.final_l1_uncertainty = err.l1_uncertainty
        report.eval_points = err.num_eval_points
        report.reference_kind = err.reference_kind
    return params, report


def _ckpt_path(checkpoint_dir):
    import os

    return os.path.join(str(checkpoint_dir), "checkpoint.npz")


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, net_spec: NetworkSpec, params: ParamSet, adam_state, iteration):
    """Versioned npz dump of spec + parameters + optimizer state."""
    arrays = {
        "meta": np.frombuffer(
            json.dumps(
                {
                    "checkpoint_version": CHECKPOINT_VERSION,
                    "layer_widths": list(net_spec.layer_widths),
                    "hidden_activation": net_spec.hidden_activation,
                    "output_activation": net_spec.output_activation,
                    "iteration": int(iteration),
                    "adam_step_count": 0 if adam_state is None else int(adam_state.step_count),
                    "has_adam": adam_state is not None,
                }
            ).encode(),
            dtype=np.uint8,
        )
    }
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
        if adam_state is not None:
            arrays[f"m_w{i}"] = adam_state.first_moment.weights[i]
            arrays[f"m_b{i}"] = adam_state.first_moment.biases[i]
            arrays[f"v_w{i}"] = adam_state.second_moment.weights[i]
            arrays[f"v_b{i}"] = adam_state.second_moment.biases[i]
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (net_spec, params, adam_state or None, iteration)."""
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
                raise ConfigError(
                    f"unsupported checkpoint version {meta.get('checkpoint_version')!r}"
                )
            spec = NetworkSpec(
                tuple(meta["layer_widths"]),
                meta["hidden_activation"],
                meta["output_activation"],
            )
            n = spec.num_layers
            params = ParamSet(
                spec, [data[f"w{i}"] for i in range(n)], [data[f"b{i}"] for i in range(n)]
            )
            adam_state = None
            if meta.get("has_adam"):
                m = ParamSet(
                    spec, [data[f"m_w{i}"] for i in range(n)], [data[f"m_b{i}"] for i in range(n)]
                )
                v = ParamSet(
                    spec, [data[f"v_w{i}"] for i in range(n)], [data[f"v_b{i}"] for i in range(n)]
                )
                adam_state = AdamState(m, v, meta["adam_step_count"])
            return spec, params, adam_state, meta["iteration"]
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
