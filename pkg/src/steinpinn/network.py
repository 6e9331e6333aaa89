"""Minimal fully-connected network with exact derivative propagation.

Everything here is plain float64 numpy. The module provides

* ``forward`` -- batched evaluation of the scalar-output MLP,
* ``backward_params`` -- reverse-mode gradients w.r.t. weights/biases for a
  weighted sum of outputs (the single back-propagation pass of training),
* ``input_gradient`` -- exact per-point gradients w.r.t. the inputs,
* ``input_jet`` -- exact (value, input gradient, input Laplacian) via
  layerwise propagation; this is both the derivative oracle and the
  stacked-differentiation baseline whose cost grows linearly with the
  input dimension.

All functions are pure: identical inputs give identical outputs, and a
ParamSet is never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

HIDDEN_ACTIVATIONS = ("tanh",)
OUTPUT_ACTIVATIONS = ("identity", "tanh")

# Rows processed per chunk in batched passes; bounds peak memory while
# keeping accumulation order fixed (and therefore bit-reproducible).
CHUNK_ROWS = 1 << 16


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: layer widths and activations.

    ``layer_widths`` runs input -> hidden... -> output, so a "4-layer MLP
    with hidden dimension 256" on a d-dimensional input is
    ``(d, 256, 256, 256, 1)``.
    """

    layer_widths: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError("network needs at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {widths}")
        if widths[-1] != 1:
            raise ConfigError("scalar-output network required (last width must be 1)")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1


def mlp_spec(input_dim, layers=4, hidden_dim=256, output_activation="identity"):
    """Spec for the standard architecture: ``layers`` affine maps with
    ``hidden_dim``-wide tanh hidden layers and a scalar output."""
    if layers < 1:
        raise ConfigError("need at least one affine layer")
    widths = (int(input_dim),) + (int(hidden_dim),) * (layers - 1) + (1,)
    return NetworkSpec(widths, output_activation=output_activation)


class ParamSet:
    """Per-layer weight matrices (out x in) and bias vectors.

    Also used for parameter gradients and Adam moments, which share the
    same shapes by construction.
    """

    __slots__ = ("spec", "weights", "biases")

    def __init__(self, spec: NetworkSpec, weights, biases, check=True):
        self.spec = spec
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        if check:
            self._validate()

    def _validate(self):
        widths = self.spec.layer_widths
        if len(self.weights) != self.spec.num_layers or len(self.biases) != self.spec.num_layers:
            raise ConfigError("parameter count does not match the network spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i + 1], widths[i]):
                raise ConfigError(
                    f"layer {i} weight shape {w.shape} != {(widths[i + 1], widths[i])}"
                )
            if b.shape != (widths[i + 1],):
                raise ConfigError(f"layer {i} bias shape {b.shape} != {(widths[i + 1],)}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"non-finite entries in layer {i} parameters")

    def copy(self) -> "ParamSet":
        return ParamSet(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            check=False,
        )

    def arrays(self):
        """All parameter arrays in a fixed order (weights then bias per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec) -> "ParamSet":
        """New ParamSet with the same shapes, entries taken from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[k : k + w.size].reshape(w.shape).copy())
            k += w.size
            biases.append(vec[k : k + b.size].copy())
            k += b.size
        if k != vec.size:
            raise ConfigError(f"vector length {vec.size} != parameter count {k}")
        return ParamSet(self.spec, weights, biases, check=False)

    def map(self, fn, *others) -> "ParamSet":
        """Entrywise combination with other ParamSets of identical shape."""
        weights = [fn(w, *(o.weights[i] for o in others)) for i, w in enumerate(self.weights)]
        biases = [fn(b, *(o.biases[i] for o in others)) for i, b in enumerate(self.biases)]
        return ParamSet(self.spec, weights, biases, check=False)


ParamGradient = ParamSet


def zeros_like(params: ParamSet) -> ParamSet:
    return params.map(np.zeros_like)


def init_params(spec: NetworkSpec, seed) -> ParamSet:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(_seed_key(seed))))
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return ParamSet(spec, weights, biases, check=False)


def _seed_key(seed):
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) & (2**64 - 1) for s in seed)
    return int(seed) & (2**64 - 1)


def _as_batch(points, input_dim):
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != input_dim:
        raise ConfigError(f"points have shape {np.shape(points)}, expected (*, {input_dim})")
    return pts, single


def _forward_cached(params: ParamSet, pts):
    """Forward pass keeping post-activation values for a backward pass."""
    acts = [pts]  # inputs to each layer
    a = pts
    last = params.spec.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        s = a @ w.T
        s += b
        if i < last:
            a = np.tanh(s)
        elif params.spec.output_activation == "tanh":
            a = np.tanh(s)
        else:
            a = s
        acts.append(a)
    return acts


def forward(params: ParamSet, points) -> np.ndarray:
    """Evaluate the network on ``points`` (B x d or a single d-vector)."""
    pts, single = _as_batch(points, params.spec.input_dim)
    out = np.empty(pts.shape[0])
    for lo in range(0, pts.shape[0], CHUNK_ROWS):
        hi = min(lo + CHUNK_ROWS, pts.shape[0])
        out[lo:hi] = _forward_cached(params, pts[lo:hi])[-1][:, 0]
    return out[0] if single else out


def backward_params(params: ParamSet, points, output_cotangents) -> ParamSet:
    """Gradient of sum_i c_i * f(x_i) with respect to all parameters.

    ``output_cotangents`` supplies the c_i. Accumulation is chunked at a
    fixed row count so results do not depend on available memory.
    """
    pts, _ = _as_batch(points, params.spec.input_dim)
    cot = np.asarray(output_cotangents, dtype=np.float64).reshape(-1)
    if cot.shape[0] != pts.shape[0]:
        raise ConfigError(f"{cot.shape[0]} cotangents for {pts.shape[0]} points")
    if not np.isfinite(cot).all():
        raise NumericError("non-finite output cotangents")
    grad = zeros_like(params)
    for lo in range(0, pts.shape[0], CHUNK_ROWS):
        hi = min(lo + CHUNK_ROWS, pts.shape[0])
        acts = _forward_cached(params, pts[lo:hi])
        _accumulate_backward(params, acts, cot[lo:hi], grad)
    return grad


def _accumulate_backward(params, acts, cot, grad):
    """Reverse pass over one chunk; adds into ``grad`` in place."""
    last = params.spec.num_layers - 1
    if params.spec.output_activation == "tanh":
        dz = (cot * (1.0 - acts[-1][:, 0] ** 2))[:, None]
    else:
        dz = cot[:, None]
    for i in range(last, -1, -1):
        a_in = acts[i]
        grad.weights[i] += dz.T @ a_in
        grad.biases[i] += dz.sum(axis=0)
        if i > 0:
            da = dz @ params.weights[i]
            dz = da * (1.0 - a_in**2)  # tanh'(s) = 1 - tanh(s)^2


def value_and_pullback(params: ParamSet, points):
    """Forward pass that keeps its activations for one backward pass.

    Returns ``(values, pullback)`` where ``pullback(cotangents, into)``
    accumulates the parameter gradient of sum_i c_i f(x_i) into ``into``
    (a ParamSet-shaped accumulator). The caller is responsible for keeping
    the chunk small enough to hold the activations; training code groups
    whole collocation points so the cotangents of a chunk are
    self-contained.
    """
    pts, _ = _as_batch(points, params.spec.input_dim)
    acts = _forward_cached(params, pts)

    def pullback(cotangents, into):
        cot = np.asarray(cotangents, dtype=np.float64).reshape(-1)
        if cot.shape[0] != pts.shape[0]:
            raise ConfigError(f"{cot.shape[0]} cotangents for {pts.shape[0]} points")
        if not np.isfinite(cot).all():
            raise NumericError("non-finite output cotangents")
        _accumulate_backward(params, acts, cot, into)
        return into

    return acts[-1][:, 0], pullback


def input_gradient(params: ParamSet, points, cotangents=None):
    """Exact gradient of f w.r.t. its inputs, for each point.

    With ``cotangents`` c the rows are c_i * grad f(x_i) instead; this is
    what weighted sums of per-sample gradients need.
    """
    pts, single = _as_batch(points, params.spec.input_dim)
    if cotangents is None:
        cot = np.ones(pts.shape[0])
    else:
        cot = np.asarray(cotangents, dtype=np.float64).reshape(-1)
        if cot.shape[0] != pts.shape[0]:
            raise ConfigError(f"{cot.shape[0]} cotangents for {pts.shape[0]} points")
    out = np.empty_like(pts)
    last = params.spec.num_layers - 1
    for lo in range(0, pts.shape[0], CHUNK_ROWS):
        hi = min(lo + CHUNK_ROWS, pts.shape[0])
        acts = _forward_cached(params, pts[lo:hi])
        if params.spec.output_activation == "tanh":
            dz = (cot[lo:hi] * (1.0 - acts[-1][:, 0] ** 2))[:, None]
        else:
            dz = cot[lo:hi, None].copy()
        for i in range(last, 0, -1):
            da = dz @ params.weights[i]
            dz = da * (1.0 - acts[i] ** 2)
        out[lo:hi] = dz @ params.weights[0]
    return out[0] if single else out


def value_and_input_pullback(params: ParamSet, points):
    """Forward pass plus a pullback to *input* gradients.

    Returns ``(values, pullback)``; ``pullback(cotangents)`` gives the
    (B, d) rows c_i * grad f(x_i), reusing the stored activations so the
    forward work is not repeated. One forward pass supports any number of
    pullback calls.
    """
    pts, _ = _as_batch(points, params.spec.input_dim)
    acts = _forward_cached(params, pts)
    last = params.spec.num_layers - 1
    derivs = [1.0 - acts[i] ** 2 for i in range(1, last + 1)]  # tanh' per hidden layer

    def pullback(cotangents):
        cot = np.asarray(cotangents, dtype=np.float64).reshape(-1)
        if cot.shape[0] != pts.shape[0]:
            raise ConfigError(f"{cot.shape[0]} cotangents for {pts.shape[0]} points")
        if params.spec.output_activation == "tanh":
            dz = (cot * (1.0 - acts[-1][:, 0] ** 2))[:, None]
        else:
            dz = cot[:, None]
        for i in range(last, 0, -1):
            dz = dz @ params.weights[i]
            dz *= derivs[i - 1]
        return dz @ params.weights[0]

    return acts[-1][:, 0], pullback


@dataclass
class InputJet:
    """Exact value, input gradient and input Laplacian of the network."""

    value: np.ndarray
    gradient: np.ndarray
    laplacian: np.ndarray


def input_jet(params: ParamSet, points, jet_chunk_rows=None) -> InputJet:
    """Exact (f, grad_x f, lap_x f) by layerwise propagation.

    For each layer z = phi(W a + b) with input Jacobian J_a and
    componentwise Laplacian L_a, the propagated quantities are

        J_s = W J_a
        J_z = phi'(s) * J_s
        L_z = phi''(s) * rowsumsq(J_s) + phi'(s) * (W L_a)

    The Jacobian tensor makes the per-point cost grow linearly with the
    input dimension (quadratically in the width), which is exactly the
    stacked-differentiation cost this library's estimators avoid.
    """
    pts, single = _as_batch(points, params.spec.input_dim)
    d = params.spec.input_dim
    width = max(params.spec.layer_widths)
    if jet_chunk_rows is None:
        # keep the (rows, width, d) Jacobian tensor under ~256 MB
        jet_chunk_rows = max(1, min(CHUNK_ROWS, (1 << 25) // max(1, width * d)))
    vals = np.empty(pts.shape[0])
    grads = np.empty_like(pts)
    laps = np.empty(pts.shape[0])
    for lo in range(0, pts.shape[0], jet_chunk_rows):
        hi = min(lo + jet_chunk_rows, pts.shape[0])
        v, g, l = _jet_chunk(params, pts[lo:hi])
        vals[lo:hi] = v
        grads[lo:hi] = g
        laps[lo:hi] = l
    if single:
        return InputJet(vals[0], grads[0], laps[0])
    return InputJet(vals, grads, laps)


def _jet_chunk(params, pts):
    spec = params.spec
    last = spec.num_layers - 1
    a = pts
    jac = None  # (B, width, d); None encodes the identity Jacobian of the input
    lap = None  # (B, width); None encodes all-zero Laplacians
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        s = a @ w.T + b
        if jac is None:
            jac_s = np.broadcast_to(w, (pts.shape[0],) + w.shape)
        else:
            jac_s = np.matmul(w, jac)
        lap_s = None if lap is None else lap @ w.T
        is_tanh = i < last or spec.output_activation == "tanh"
        if is_tanh:
            a = np.tanh(s)
            d1 = 1.0 - a**2  # tanh'
            d2 = -2.0 * a * d1  # tanh''
            rowsq = np.einsum("bod,bod->bo", jac_s, jac_s)
            lap = d2 * rowsq
            if lap_s is not None:
                lap += d1 * lap_s
            jac = d1[:, :, None] * jac_s
        else:
            a = s
            jac = np.ascontiguousarray(jac_s)
            lap = np.zeros_like(s) if lap_s is None else lap_s
    return a[:, 0], jac[:, 0, :], lap[:, 0]
