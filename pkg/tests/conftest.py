"""Shared fixtures: analytic base functions with hand-derived closed forms.

Each base provides the exact pointwise derivatives and the closed form of
the Gaussian-convolved function u = f * N(0, sigma^2 I), so estimator
tests never compare an estimator against itself.
"""

import math

import numpy as np
import pytest

from steinpinn import forward, init_params, mlp_spec


class ConstantBase:
    def __init__(self, c, dim):
        self.c = float(c)
        self.dim = dim

    def __call__(self, pts):
        return np.full(np.asarray(pts).shape[0], self.c)

    def grad(self, pts):
        return np.zeros_like(np.asarray(pts, dtype=float))

    def lap(self, pts):
        return np.zeros(np.asarray(pts).shape[0])

    def conv_value(self, x, sigma):
        return self.c

    def conv_grad(self, x, sigma):
        return np.zeros(self.dim)

    def conv_lap(self, x, sigma):
        return 0.0


class LinearBase:
    def __init__(self, a, b=0.0):
        self.a = np.asarray(a, dtype=float)
        self.b = float(b)
        self.dim = self.a.shape[0]

    def __call__(self, pts):
        return np.asarray(pts) @ self.a + self.b

    def grad(self, pts):
        return np.broadcast_to(self.a, np.asarray(pts).shape).copy()

    def lap(self, pts):
        return np.zeros(np.asarray(pts).shape[0])

    def conv_value(self, x, sigma):
        return float(np.dot(self.a, x) + self.b)

    def conv_grad(self, x, sigma):
        return self.a.copy()

    def conv_lap(self, x, sigma):
        return 0.0


class QuadraticBase:
    """f(x) = x^T A x / 2 + b^T x + c with symmetric A."""

    def __init__(self, A, b=None, c=0.0):
        self.A = np.asarray(A, dtype=float)
        self.A = 0.5 * (self.A + self.A.T)
        self.dim = self.A.shape[0]
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=float)
        self.c = float(c)

    def __call__(self, pts):
        pts = np.asarray(pts)
        return 0.5 * np.einsum("bi,ij,bj->b", pts, self.A, pts) + pts @ self.b + self.c

    def grad(self, pts):
        return np.asarray(pts) @ self.A + self.b

    def lap(self, pts):
        return np.full(np.asarray(pts).shape[0], np.trace(self.A))

    def conv_value(self, x, sigma):
        # E[f(x+d)] picks up sigma^2 tr(A) / 2 from the quadratic term
        base = 0.5 * x @ self.A @ x + self.b @ x + self.c
        return float(base + 0.5 * sigma**2 * np.trace(self.A))

    def conv_grad(self, x, sigma):
        return self.A @ x + self.b

    def conv_lap(self, x, sigma):
        return float(np.trace(self.A))


class SinBase:
    """f(x) = sin(x_1); convolution damps by exp(-sigma^2 / 2)."""

    def __init__(self, dim):
        self.dim = dim

    def __call__(self, pts):
        return np.sin(np.asarray(pts)[:, 0])

    def grad(self, pts):
        g = np.zeros_like(np.asarray(pts, dtype=float))
        g[:, 0] = np.cos(np.asarray(pts)[:, 0])
        return g

    def lap(self, pts):
        return -np.sin(np.asarray(pts)[:, 0])

    def conv_value(self, x, sigma):
        return math.exp(-0.5 * sigma**2) * math.sin(x[0])

    def conv_grad(self, x, sigma):
        g = np.zeros(self.dim)
        g[0] = math.exp(-0.5 * sigma**2) * math.cos(x[0])
        return g

    def conv_lap(self, x, sigma):
        return -math.exp(-0.5 * sigma**2) * math.sin(x[0])


def make_bases(dim, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dim, dim))
    return {
        "constant": ConstantBase(1.7, dim),
        "linear": LinearBase(rng.standard_normal(dim), 0.4),
        "quadratic": QuadraticBase(A + A.T, rng.standard_normal(dim), -0.3),
        "sin": SinBase(dim),
    }


@pytest.fixture
def small_net():
    spec = mlp_spec(4, layers=3, hidden_dim=12)
    params = init_params(spec, seed=321)
    return params


def net_fn(params):
    return lambda pts: forward(params, pts)
